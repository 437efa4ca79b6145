"""L1 objective, Adam, step-decay schedule and the checkpointing training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_state, read_checkpoint, save_checkpoint
from .data import ErpDataset, PatchSampler, upsample_bicubic, validation_patches
from .errors import ConfigError, ContractError, InputError, TrainingDiverged
from .metrics import psnr, ws_psnr
from .model import MDDN
from .numerics import Parameter

log = logging.getLogger(__name__)

PAPER_BASE_LR = 2e-4
PAPER_MILESTONES = (250_000, 400_000, 450_000, 475_000)
PAPER_TOTAL = 500_000
LOG_FIELDS = ("step", "loss", "lr", "val_psnr", "val_ws_psnr")


def l1_loss(i_sr: np.ndarray, i_gt: np.ndarray):
    """Mean absolute error; returns ``(loss, vjp)`` with ``vjp(g) -> grad wrt i_sr``."""
    i_sr = np.asarray(i_sr)
    i_gt = np.asarray(i_gt)
    if i_sr.shape != i_gt.shape:
        raise InputError(f"l1_loss shapes differ: {i_sr.shape} vs {i_gt.shape}")
    diff = i_sr.astype(np.float64) - i_gt
    loss = float(np.mean(np.abs(diff)))

    def vjp(g=1.0):
        return (np.sign(diff) * (g / diff.size)).astype(i_sr.dtype)

    return loss, vjp


def scaled_milestones(total: int, milestones: Sequence[int] = PAPER_MILESTONES,
                      reference_total: int = PAPER_TOTAL) -> tuple[int, ...]:
    """Milestones stretched from a ``reference_total``-step horizon to ``total`` steps."""
    return tuple(m * total // reference_total for m in milestones)


def lr_schedule(step: int, base: float = PAPER_BASE_LR, milestones: Sequence[int] = PAPER_MILESTONES,
                total: int = PAPER_TOTAL) -> float:
    """``base`` halved once per milestone reached.

    ``milestones`` are positions on the full 500k-step horizon; for ``total``
    other than that horizon they are rescaled proportionally.
    """
    if step < 0:
        raise InputError("step must be non-negative")
    ms = milestones if total == PAPER_TOTAL else scaled_milestones(total, milestones)
    return base * 0.5 ** sum(1 for m in ms if m <= step)


class Adam:
    """Bias-corrected Adam over named parameters (no weight decay)."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params: dict[str, Parameter] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if not p.touched]
        if missing:
            raise ContractError(f"no gradient for parameter {missing[0]!r} ({len(missing)} missing)")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"adam.{slot}.{k}"
                if key not in tensors:
                    raise ConfigError(f"optimizer state lacks tensor {key!r}")
                if tensors[key].shape != p.value.shape:
                    raise ConfigError(f"optimizer tensor {key!r} shape {tensors[key].shape} != {p.value.shape}")
                store[k] = tensors[key].astype(p.value.dtype, copy=True)
        self.t = t


def grad_norm(params: Sequence[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 4
    patch: int = 256  # HR patch side
    base_lr: float = PAPER_BASE_LR
    paper_schedule: bool = False  # keep the 500k-step milestones unscaled
    seed: int = 0
    val_every: int = 500
    log_every: int = 50
    val_images: int = 2  # trailing manifest entries held out for validation
    val_per_image: int = 4
    val_patch: int | None = None  # defaults to ``patch``
    clip: float | None = None

    def schedule(self, step: int) -> float:
        total = PAPER_TOTAL if self.paper_schedule else self.steps
        return lr_schedule(step, self.base_lr, PAPER_MILESTONES, total)


# keyword defaults for TrainConfig per model preset
TRAIN_PRESETS = {
    "tiny": {"steps": 2000, "batch": 4, "patch": 48, "base_lr": 1e-3, "val_every": 250, "val_per_image": 8},
    "paper": {"steps": PAPER_TOTAL, "batch": 4, "patch": 256, "base_lr": PAPER_BASE_LR, "paper_schedule": True},
}


@dataclass
class TrainState:
    step: int = 0
    lr: float = PAPER_BASE_LR
    seed: int = 0
    best_val_ws_psnr: float = -math.inf
    last_val: tuple[float, float] | None = None
    history: list = field(default_factory=list)  # (step, loss, grad_norm)


def _meta(state: TrainState, adam: Adam, tcfg: TrainConfig) -> dict:
    meta = {"step": state.step, "adam_t": adam.t, "lr": repr(state.lr), "seed": state.seed,
            "best_val_ws_psnr": repr(state.best_val_ws_psnr)}
    for f in dataclasses.fields(tcfg):
        meta[f"train.{f.name}"] = getattr(tcfg, f.name)
    return meta


def split_indices(n: int, val_images: int) -> tuple[list[int], list[int]]:
    if val_images >= n:
        raise InputError(f"need more than {val_images} images to hold out {val_images} for validation")
    return list(range(n - val_images)), list(range(n - val_images, n))


def validate(model: MDDN, patches, batch: int = 8) -> tuple[float, float]:
    """Mean PSNR / WS-PSNR of clamped model output over held-out patches."""
    if not patches:
        return float("nan"), float("nan")
    full_h = patches[0].full_height
    ps, ws = [], []
    for i in range(0, len(patches), batch):
        chunk = patches[i : i + batch]
        x = np.stack([p.lr_patch for p in chunk])
        rows = [p.lr_row_offset for p in chunk]
        out = model.forward(x, row_offset=rows, full_height=full_h // model.cfg.scale, clamp=True)
        for o, p in zip(out, chunk):
            ps.append(psnr(o, p.hr_patch))
            ws.append(ws_psnr(o, p.hr_patch, full_h, p.hr_row_offset))
    return float(np.mean(ps)), float(np.mean(ws))


def bicubic_baseline(patches) -> tuple[float, float]:
    ps, ws = [], []
    for p in patches:
        up = np.clip(upsample_bicubic(p.lr_patch, p.scale), 0, 1)
        ps.append(psnr(up, p.hr_patch))
        ws.append(ws_psnr(up, p.hr_patch, p.full_height, p.hr_row_offset))
    return float(np.mean(ps)), float(np.mean(ws))


def train_loop(model: MDDN, dataset: ErpDataset, tcfg: TrainConfig, out_dir, resume=None,
               stop_at: int | None = None) -> TrainState:
    """Train ``model`` in place, writing ``train_log.csv``, ``latest.ckpt`` and ``best.ckpt``.

    Batch ``k`` is drawn from ``default_rng((seed, k))``, so resuming from
    ``latest.ckpt`` continues the uninterrupted run bit-exactly. ``stop_at``
    ends the run early (after saving) without changing the schedule.
    """
    if dataset.scale != model.cfg.scale:
        raise ConfigError(f"dataset scale x{dataset.scale} != model scale x{model.cfg.scale}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_idx, val_idx = split_indices(len(dataset), tcfg.val_images)
    sampler = PatchSampler(dataset, train_idx, tcfg.patch, tcfg.batch, tcfg.seed)
    val_set = validation_patches(dataset, val_idx, tcfg.val_patch or tcfg.patch, tcfg.val_per_image, tcfg.seed)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    adam = Adam(named)
    state = TrainState(seed=tcfg.seed, lr=tcfg.schedule(0))

    log_path = out_dir / "train_log.csv"
    if resume is not None:
        ckpt = read_checkpoint(resume)
        if ckpt.meta is None:
            raise ConfigError(f"{resume} has no optimizer state to resume from")
        load_state(model, ckpt.tensors)
        adam.load_state_tensors(ckpt.optimizer, int(ckpt.meta["adam_t"]))
        state.step = int(ckpt.meta["step"])
        state.best_val_ws_psnr = float(ckpt.meta["best_val_ws_psnr"])
        if int(ckpt.meta["seed"]) != tcfg.seed:
            raise ConfigError("resume seed differs from the configured seed")
        _truncate_log(log_path, state.step)
    else:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)

    t0 = time.perf_counter()
    end = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)
    for step in range(state.step, end):
        state.lr = tcfg.schedule(step)
        batch = sampler.batch_at(step)
        out = model.forward(batch.lr, row_offset=batch.lr_row_offsets, full_height=batch.lr_full_height)
        loss, vjp = l1_loss(out, batch.hr)
        if not math.isfinite(loss):
            dump = out_dir / f"diverged_step{step}.txt"
            dump.write_text(f"step = {step}\nbatch_seed = {batch.seed}\nlr = {state.lr!r}\n")
            raise TrainingDiverged(f"non-finite loss at step {step} (batch seed {batch.seed}); see {dump}")
        model.backward(vjp(1.0))
        gnorm = grad_norm(params)
        if tcfg.clip is not None and gnorm > tcfg.clip:
            for p in params:
                p.grad *= tcfg.clip / gnorm
        adam.step(state.lr)
        state.step = step + 1
        state.history.append((state.step, loss, gnorm))

        validate_now = state.step % tcfg.val_every == 0 or state.step == end
        if validate_now or state.step % tcfg.log_every == 0:
            row = [state.step, repr(loss), repr(state.lr), "", ""]
            if validate_now:
                vp, vw = validate(model, val_set)
                state.last_val = (vp, vw)
                row[3:] = [f"{vp:.6f}", f"{vw:.6f}"]
                if vw > state.best_val_ws_psnr:
                    state.best_val_ws_psnr = vw
                    save_checkpoint(model, out_dir / "best.ckpt", _meta(state, adam, tcfg), adam.state_tensors())
                save_checkpoint(model, out_dir / "latest.ckpt", _meta(state, adam, tcfg), adam.state_tensors())
                log.info("step %d loss %.5f lr %.3g val psnr %.3f ws-psnr %.3f (%.1fs)",
                         state.step, loss, state.lr, vp, vw, time.perf_counter() - t0)
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)
    return state


def _truncate_log(path: Path, step: int) -> None:
    """Drop log rows past ``step`` so a resumed run appends a clean continuation."""
    if not path.is_file():
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
