"""``mddn`` command-line interface.

Exit codes: 0 success, 1 verification or metric failure, 2 usage or input error.
Every command that writes files puts them under ``--out DIR`` together with a
``manifest.txt`` run record written before any work starts.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import subprocess
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, InputError, TrainingDiverged

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_VARIANTS = "1;2;3;1,2;1,3;2,3;1,2,3;1,2,4;1,3,4;1,2,5;1,2,3,4"
DEFAULT_RANKS = "4,8,12,16,20"

log = logging.getLogger("mddn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# shared helpers


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(out: Path, command: str, config_text: str, seed) -> Path:
    """Write ``manifest.txt`` (the reproducibility record) before the command runs."""
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command = {command}",
        f"seed = {seed}",
        f"started = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
        f"git = {_git_describe()}",
        f"version = {__version__}",
        f"out = {out.resolve()}",
        "",
        "[config]",
        config_text.rstrip(),
        "",
    ]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines))
    return path


def _model_config(args):
    from .model import ModelConfig, preset

    cfg = preset(args.preset)
    if getattr(args, "config", None):
        cfg = ModelConfig.from_text(Path(args.config).read_text(), base=cfg)
    if getattr(args, "scale", None):
        cfg = cfg.replace(scale=args.scale)
    return cfg


def _int_list(text: str, sep: str = ",") -> list[int]:
    try:
        vals = [int(t) for t in text.split(sep) if t.strip()]
    except ValueError:
        raise UsageError(f"malformed integer list {text!r}") from None
    if not vals:
        raise UsageError(f"empty list {text!r}")
    return vals


def parse_variants(text: str) -> list[tuple[int, ...]]:
    """``"1;2;1,2"`` -> ``[(1,), (2,), (1, 2)]``."""
    from .layers import validate_branches

    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            raise UsageError(f"empty variant in {text!r}")
        try:
            out.append(validate_branches(_int_list(chunk)))
        except ConfigError as exc:
            raise UsageError(f"bad variant {chunk!r}: {exc}") from None
    return out


def _fmt_branches(b) -> str:
    return "{" + ",".join(str(x) for x in b) + "}"


# ----------------------------------------------------------------------------
# commands


def cmd_distmap(args) -> int:
    from .data import save_image
    from .geometry import distortion_map

    width = args.width if args.width is not None else 2 * args.height
    full = args.full_height if args.full_height is not None else args.height
    dm = distortion_map(args.height, width, args.row_offset, full)
    out = Path(args.out)
    write_run_manifest(out, f"distmap --height {args.height} --width {width} --row-offset {args.row_offset} "
                       f"--full-height {full}", "", "-")
    save_image(np.clip(dm.values, 0.0, 1.0), out / "distmap.png", bits=16)
    with open(out / "distmap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "weight"])
        for r, v in zip(range(dm.row_offset, dm.row_offset + dm.height), dm.rows):
            w.writerow([r, repr(float(v))])
    print(f"wrote {out / 'distmap.png'} and {out / 'distmap.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    groups = gradcheck.GROUPS if args.module == "all" else (args.module,)
    dtype = {"f64": np.float64, "f32": np.float32}[args.dtype]
    if args.out:
        write_run_manifest(Path(args.out), f"gradcheck --module {args.module} --dtype {args.dtype}", "", args.seed)

    def show(r):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.group:9s} {r.name:18s} max_rel_err={r.error:.3e}  ({r.seconds:.1f}s)  {status}", flush=True)

    results = gradcheck.run(groups, dtype, args.seed, args.threshold, progress=show)
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED {r.name}: error {r.error:.3e} > {r.threshold:.1e} at {r.worst}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} ops within {results[0].threshold:.0e}" if results else "nothing to check")
    return EXIT_OK


def _train_config(args, preset_name):
    from .training import TRAIN_PRESETS, TrainConfig

    base = dict(TRAIN_PRESETS[preset_name])
    for key in ("steps", "batch", "patch", "seed", "val_every", "log_every", "val_images", "clip"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if getattr(args, "lr", None) is not None:
        base["base_lr"] = args.lr
    if getattr(args, "paper_schedule", False):
        base["paper_schedule"] = True
    return TrainConfig(**base)


def cmd_train(args) -> int:
    from .checkpoint import read_checkpoint
    from .data import ErpDataset
    from .model import MDDN
    from .training import train_loop

    data = Path(args.data)
    if not (data / args.manifest).is_file():
        raise FileNotFoundError(f"dataset manifest not found: {data / args.manifest}")
    cfg = _model_config(args)
    if args.resume:
        stored = read_checkpoint(args.resume).config
        if stored != cfg:
            raise ConfigError("resume checkpoint was trained with a different model config")
    tcfg = _train_config(args, args.preset)
    out = Path(args.out)
    cfg_text = cfg.to_text() + "".join(f"train.{k} = {v}\n" for k, v in vars(tcfg).items())
    write_run_manifest(out, "train " + " ".join(args.argv), cfg_text, tcfg.seed)
    dataset = ErpDataset(data, cfg.scale, args.manifest)
    model = MDDN(cfg, seed=tcfg.seed, dtype=np.float32)
    state = train_loop(model, dataset, tcfg, out, resume=args.resume)
    vp, vw = state.last_val if state.last_val else (float("nan"), float("nan"))
    print(f"trained to step {state.step}; val psnr {vp:.3f} dB, ws-psnr {vw:.3f} dB; "
          f"best ws-psnr {state.best_val_ws_psnr:.3f} dB")
    return EXIT_OK


def _read_pairs(path: Path) -> list[tuple[Path, Path]]:
    from .data import read_manifest

    if not path.is_file():
        raise FileNotFoundError(f"pair manifest not found: {path}")
    pairs = []
    for line in read_manifest(path):
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"{path}: expected two paths per line, got {line!r}")
        pairs.append((path.parent / parts[0], path.parent / parts[1]))
    return pairs


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image
    from .metrics import evaluate
    from .model import upscale

    pairs = _read_pairs(Path(args.pairs))
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    out = Path(args.out)
    write_run_manifest(out, "eval " + " ".join(args.argv), model.cfg.to_text() if model else "", "-")
    rows = []
    for first, gt_path in pairs:
        gt = load_image(gt_path)
        img = load_image(first).data
        if model is not None:
            img = upscale(model, img, args.tile, args.overlap)
        if img.shape != gt.data.shape:
            raise InputError(f"{first.name}: size {img.shape[1:]} does not match ground truth {gt.data.shape[1:]}")
        rep = evaluate(img, gt.data, gt.height, 0, args.y_channel, args.crop_border)
        rows.append((first.name, rep))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr", "ssim", "ws_psnr", "ws_ssim"])
        for name, r in rows:
            w.writerow([name, f"{r.psnr:.4f}", f"{r.ssim:.4f}", f"{r.ws_psnr:.4f}", f"{r.ws_ssim:.4f}"])
        means = [float(np.mean([getattr(r, k) for _, r in rows])) for k in ("psnr", "ssim", "ws_psnr", "ws_ssim")]
        w.writerow(["mean"] + [f"{m:.4f}" for m in means])
    print(f"{len(rows)} images: PSNR {means[0]:.2f}  SSIM {means[1]:.4f}  "
          f"WS-PSNR {means[2]:.2f}  WS-SSIM {means[3]:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import SUPPORTED_SUFFIXES, load_image, save_image
    from .model import upscale

    model = load_checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != model.cfg.scale:
        raise ConfigError(f"--scale {args.scale} but the checkpoint is a x{model.cfg.scale} model")
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
    elif src.is_file():
        files = [src]
    else:
        raise FileNotFoundError(f"input not found: {src}")
    out = Path(args.out)
    write_run_manifest(out, "infer " + " ".join(args.argv), model.cfg.to_text(), "-")
    for f in files:
        img = load_image(f)
        if not img.full_erp and args.full_height is None:
            log.warning("%s is not a full 2:1 panorama; treating it as one (pass --full-height)", f.name)
        sr = upscale(model, img.data, args.tile, args.overlap, args.row_offset, args.full_height)
        dest = out / f"{f.stem}_x{model.cfg.scale}.png"
        save_image(sr, dest, bits=img.bit_depth)
        print(f"{f.name}: {img.height}x{img.width} -> {sr.shape[1]}x{sr.shape[2]} ({dest.name})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .model import REFERENCE_PARAMS_M, REFERENCE_RANK_PARAMS_M, count_params, preset

    variants = parse_variants(args.variants)
    ranks = _int_list(args.rank_sweep)
    if any(r < 1 for r in ranks):
        raise UsageError("ranks must be positive")
    base = preset(args.preset, scale=args.scale, fusion=args.fusion)
    runs = []
    for v in variants:
        runs.append(("branches", base.replace(branches=v), REFERENCE_PARAMS_M.get(v)))
    for r in ranks:
        runs.append(("rank", base.replace(rank=r), REFERENCE_RANK_PARAMS_M.get(r)))
    for fusion in ("mff", "addition"):
        runs.append(("fusion", base.replace(fusion=fusion), None))
    out = Path(args.out)
    write_run_manifest(out, "ablate " + " ".join(args.argv), base.to_text(), args.seed)

    trainer = None
    if args.train_steps:
        trainer = _ablation_trainer(args)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["study", "branches", "rank", "fusion", "params", "params_m", "reference_m",
                    "rel_deviation", "val_psnr", "val_ws_psnr"])
        for study, cfg, ref in runs:
            n = count_params(cfg)
            dev = "" if ref is None else f"{(n / 1e6 - ref) / ref:+.4f}"
            vp = vw = ""
            if trainer is not None:
                vp, vw = (f"{x:.4f}" for x in trainer(study, cfg))
            w.writerow([study, _fmt_branches(cfg.branches), cfg.rank, cfg.fusion, n, f"{n / 1e6:.3f}",
                        "" if ref is None else ref, dev, vp, vw])
            print(f"{study:8s} {_fmt_branches(cfg.branches):11s} r={cfg.rank:<3d} {cfg.fusion:8s} "
                  f"{n / 1e6:7.3f} M" + ("" if ref is None else f"  (reported {ref} M, {dev})"))
    return EXIT_OK


def _ablation_trainer(args):
    """Smoke-train the ``--train-preset`` sized version of each configuration."""
    from .data import ErpDataset
    from .model import MDDN, preset
    from .training import TrainConfig, train_loop

    data = Path(args.data or "")
    if not args.data or not (data / "manifest.txt").is_file():
        raise FileNotFoundError("--train-steps needs --data DIR with a manifest.txt")
    small = preset(args.train_preset)
    tcfg = _train_config(argparse.Namespace(steps=args.train_steps, seed=args.seed), args.train_preset)
    dataset = ErpDataset(data, args.scale)

    def train(study, cfg):
        run_cfg = small.replace(branches=cfg.branches, rank=cfg.rank, fusion=cfg.fusion, scale=cfg.scale)
        tag = f"{study}_{'-'.join(map(str, cfg.branches))}_r{cfg.rank}_{cfg.fusion}"
        model = MDDN(run_cfg, seed=tcfg.seed)
        state = train_loop(model, dataset, tcfg, Path(args.out) / tag)
        return state.last_val

    return train


def cmd_params(args) -> int:
    from .model import (REFERENCE_PARAMS_M, REFERENCE_X8_MACS_G, REFERENCE_X8_PARAMS_M, count_params,
                        multiply_adds)

    cfg = _model_config(args)
    n = count_params(cfg)
    macs = multiply_adds(cfg, args.size, args.size)
    print(f"config: {_fmt_branches(cfg.branches)} C={cfg.channels} blocks={cfg.n_blocks}x{cfg.n_layers} "
          f"r={cfg.rank} x{cfg.scale} fusion={cfg.fusion}")
    line = f"params: {n} ({n / 1e6:.3f} M)"
    ref = REFERENCE_X8_PARAMS_M if cfg.scale == 8 else REFERENCE_PARAMS_M.get(cfg.branches) if cfg.scale == 4 else None
    if ref is not None and args.preset == "paper":
        line += f"; reported {ref} M, relative deviation {(n / 1e6 - ref) / ref:+.2%}"
    print(line)
    line = f"multiply-adds at {args.size}x{args.size}: {macs / 1e9:.3f} G"
    if cfg.scale == 8 and args.preset == "paper" and args.size == 64:
        line += f"; reported {REFERENCE_X8_MACS_G} G, relative deviation {(macs / 1e9 - REFERENCE_X8_MACS_G) / REFERENCE_X8_MACS_G:+.2%}"
    print(line)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import degrade, save_image, synth_erp, upsample_bicubic

    out = Path(args.out)
    write_run_manifest(out, "synth " + " ".join(args.argv), "", args.seed)
    hr_dir = out / "hr"
    hr_dir.mkdir(parents=True, exist_ok=True)
    names = []
    pairs = []
    for k in range(args.count):
        name = f"pano_{k:03d}.png"
        img = synth_erp(args.height, args.seed * 1000 + k)
        save_image(img, hr_dir / name)
        names.append(name)
        if args.scale:
            s = args.scale
            lr = degrade(img, s)
            save_image(lr, out / f"lr_x{s}" / name)
            save_image(np.clip(upsample_bicubic(lr, s), 0, 1), out / f"bicubic_x{s}" / name)
            pairs.append(name)
    (hr_dir / "manifest.txt").write_text("\n".join(names) + "\n")
    if args.scale:
        s = args.scale
        (out / f"pairs_lr_x{s}.txt").write_text("".join(f"lr_x{s}/{n} hr/{n}\n" for n in pairs))
        (out / f"pairs_bicubic_x{s}.txt").write_text("".join(f"bicubic_x{s}/{n} hr/{n}\n" for n in pairs))
    print(f"wrote {args.count} panoramas of {args.height}x{2 * args.height} to {hr_dir}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mddn", description="Distortion-aware deformable super-resolution for ERP panoramas.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p.add_argument("--version", action="version", version=f"mddn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("distmap", help="render the ERP distortion map as 16-bit PNG and CSV")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, help="default: 2 x height")
    s.add_argument("--row-offset", type=int, default=0)
    s.add_argument("--full-height", type=int, help="rows of the full panorama (default: height)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distmap)

    s = sub.add_parser("gradcheck", help="finite-difference verification of every backward rule")
    s.add_argument("--module", choices=("all", "numerics", "sampling", "layers", "model"), default="all")
    s.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threshold", type=float, help="default 1e-6 (f64) / 1e-2 (f32)")
    s.add_argument("--out", help="optional directory for the run manifest")
    s.set_defaults(func=cmd_gradcheck)

    def model_opts(s, default_preset="tiny"):
        s.add_argument("--preset", choices=("tiny", "paper"), default=default_preset)
        s.add_argument("--config", help="key = value file overriding the preset")
        s.add_argument("--scale", type=int, choices=(2, 4, 8, 16))

    s = sub.add_parser("train", help="train on a directory of HR panoramas")
    model_opts(s)
    s.add_argument("--data", required=True, help="directory with HR images and a manifest")
    s.add_argument("--manifest", default="manifest.txt")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--patch", type=int, help="HR patch side")
    s.add_argument("--lr", type=float, help="base learning rate")
    s.add_argument("--paper-schedule", action="store_true", help="keep the 500k-step milestones unscaled")
    s.add_argument("--val-images", type=int)
    s.add_argument("--val-every", type=int)
    s.add_argument("--log-every", type=int)
    s.add_argument("--clip", type=float, help="clip the global gradient norm (off by default)")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="continue from a latest.ckpt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM/WS-PSNR/WS-SSIM over a manifest of image pairs")
    s.add_argument("--pairs", required=True, help="file of 'image ground_truth' lines")
    s.add_argument("--checkpoint", help="if given, the first column holds LR inputs to upscale")
    s.add_argument("--y-channel", action="store_true")
    s.add_argument("--crop-border", type=int, default=0)
    s.add_argument("--tile", type=int, default=256)
    s.add_argument("--overlap", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="upscale LR panoramas with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="image file or directory")
    s.add_argument("--scale", type=int, help="assert the checkpoint's scale")
    s.add_argument("--tile", type=int, default=256)
    s.add_argument("--overlap", type=int, default=16)
    s.add_argument("--row-offset", type=int, default=0, help="LR row of the input within its panorama")
    s.add_argument("--full-height", type=int, help="LR rows of the full panorama")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("ablate", help="parameter counts (and optional smoke training) per ablation variant")
    s.add_argument("--variants", default=DEFAULT_VARIANTS)
    s.add_argument("--rank-sweep", default=DEFAULT_RANKS)
    s.add_argument("--fusion", choices=("mff", "addition"), default="mff")
    s.add_argument("--preset", choices=("tiny", "paper"), default="paper")
    s.add_argument("--scale", type=int, choices=(2, 4, 8, 16), default=4)
    s.add_argument("--train-steps", type=int, help="also smoke-train each variant")
    s.add_argument("--train-preset", choices=("tiny", "paper"), default="tiny")
    s.add_argument("--data", help="dataset for --train-steps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("params", help="parameter count and multiply-adds of a configuration")
    model_opts(s, "paper")
    s.add_argument("--size", type=int, default=64, help="LR input side for multiply-adds")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("synth", help="write procedural ERP panoramas (a test dataset)")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--scale", type=int, help="also write LR / bicubic copies and pair manifests")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    raw = os.environ.get("MDDN_NUM_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MDDN_NUM_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = argv[1:]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
