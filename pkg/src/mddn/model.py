"""Full network: shallow conv -> deep body of MDDBs -> pixel-shuffle head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .geometry import check_projection, distortion_batch
from .layers import MDDB, DeformConv, validate_branches
from .numerics import Conv2d, Module, pixel_shuffle

# Reported model sizes (millions of parameters) for the x4 branch variants and
# the x8 complexity comparison; used only to print relative deviations.
REFERENCE_PARAMS_M = {
    (1,): 11.73,
    (2,): 7.82,
    (3,): 7.82,
    (1, 2): 12.41,
    (1, 3): 12.41,
    (2, 3): 8.50,
    (1, 2, 3): 13.04,
    (1, 2, 4): 13.04,
    (1, 3, 4): 13.04,
    (1, 2, 5): 13.04,
    (1, 2, 3, 4): 13.67,
}
REFERENCE_RANK_PARAMS_M = {4: 12.47, 8: 13.04, 12: 13.62, 16: 14.19, 20: 14.64}
REFERENCE_X8_PARAMS_M = 13.19
REFERENCE_X8_MACS_G = 55.43


@dataclass
class ModelConfig:
    channels: int = 156
    n_blocks: int = 6
    n_layers: int = 6
    rank: int = 8
    branches: tuple[int, ...] = (1, 2, 3)
    window: int = 8
    heads: int = 6
    scale: int = 4
    ffn: bool = True
    fusion: str = "mff"
    offset_channels: int = 64
    ffn_expansion: int = 2
    projection: str = "erp"

    def __post_init__(self):
        self.branches = validate_branches(self.branches)
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} must be a positive multiple of heads {self.heads}")
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ConfigError(f"scale must be a power of two, got {self.scale}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.n_blocks < 0 or self.n_layers < 0:
            raise ConfigError("block and layer counts must be non-negative")
        if self.window < 1 or self.offset_channels < 1 or self.ffn_expansion < 1:
            raise ConfigError("window, offset_channels and ffn_expansion must be >= 1")
        if self.fusion not in ("mff", "addition"):
            raise ConfigError(f"fusion must be 'mff' or 'addition', got {self.fusion!r}")
        check_projection(self.projection)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- flat ``key = value`` text form -----------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        return cls.from_dict(parse_kv(text), base)

    @classmethod
    def from_dict(cls, values: dict[str, str], base: "ModelConfig | None" = None) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, getattr(cls(), key) if base is None else getattr(base, key))
        start = base if base is not None else cls()
        return dataclasses.replace(start, **kwargs)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("on", "true", "1", "yes"):
                return True
            if low in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(";", ",").split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


PRESETS = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(channels=32, n_blocks=2, n_layers=2, window=4, heads=4, offset_channels=16),
}


def preset(name: str, **changes) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].replace(**changes)


class MDDN(Module):
    """Multi-level distortion-aware deformable super-resolution network."""

    def __init__(self, cfg: ModelConfig, seed: int | None = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed) if seed is not None else None
        c = cfg.channels
        self.shallow = Conv2d(3, c, 3, rng=rng, dtype=dtype)
        self.blocks = [
            MDDB(c, cfg.n_layers, cfg.branches, cfg.heads, cfg.window, cfg.rank, cfg.offset_channels,
                 cfg.ffn, cfg.fusion, cfg.ffn_expansion, rng, dtype)
            for _ in range(cfg.n_blocks)
        ]
        self.body_conv = Conv2d(c, c, 3, rng=rng, dtype=dtype)
        self.body_d3c = DeformConv(c, 1, cfg.rank, cfg.offset_channels, 3, rng, dtype)
        n_up = cfg.scale.bit_length() - 1
        self.upsample = [Conv2d(c, 4 * c, 3, rng=rng, dtype=dtype) for _ in range(n_up)]
        self.tail = Conv2d(c, 3, 3, rng=rng, dtype=dtype)

    # -- pieces -----------------------------------------------------------

    def distortion(self, n, h, w, row_offset, full_height):
        return distortion_batch(h, w, row_offset, full_height, batch=n, dtype=self.dtype)

    def body(self, f0, dmap):
        x = f0
        for block in self.blocks:
            x = block.forward(x, dmap)
        x = self.body_d3c.forward(self.body_conv.forward(x), dmap)
        return f0 + x

    def body_backward(self, g):
        gx = self.body_conv.backward(self.body_d3c.backward(g))
        for block in reversed(self.blocks):
            gx = block.backward(gx)
        return g + gx

    def reconstruct(self, f):
        self._shuffle_vjps = []
        for conv in self.upsample:
            f, vjp = pixel_shuffle(conv.forward(f), 2)
            self._shuffle_vjps.append(vjp)
        return self.tail.forward(f)

    def reconstruct_backward(self, g):
        g = self.tail.backward(g)
        for conv, vjp in zip(reversed(self.upsample), reversed(self._shuffle_vjps)):
            g = conv.backward(vjp(g)[0])
        return g

    # -- whole network ----------------------------------------------------

    def forward(self, x, row_offset=0, full_height=None, clamp=False):
        if x.ndim != 4 or x.shape[1] != 3:
            raise InputError(f"expected an (N, 3, H, W) image batch, got {x.shape}")
        n, _, h, w = x.shape
        if full_height is None:
            full_height = h
        dmap = distortion_batch(h, w, row_offset, full_height, batch=n, dtype=self.shallow.weight.value.dtype)
        x = x.astype(self.shallow.weight.value.dtype, copy=False)  # compute in the parameters' precision
        f0 = self.shallow.forward(x)
        out = self.reconstruct(self.body(f0, dmap))
        return np.clip(out, 0.0, 1.0) if clamp else out

    def backward(self, g):
        g = self.reconstruct_backward(g.astype(self.dtype, copy=False))
        return self.shallow.backward(self.body_backward(g))

    def macs(self, h, w):
        total = self.shallow.macs(h, w)
        total += sum(b.macs(h, w) for b in self.blocks)
        total += self.body_conv.macs(h, w) + self.body_d3c.macs(h, w)
        for i, conv in enumerate(self.upsample):
            total += conv.macs(h * 2**i, w * 2**i)
        total += self.tail.macs(h * self.cfg.scale, w * self.cfg.scale)
        return total


def count_params(cfg: ModelConfig) -> int:
    """Exact trainable scalar count of the network built from ``cfg``."""
    return MDDN(cfg, seed=None).num_params()


def multiply_adds(cfg: ModelConfig, input_h: int, input_w: int) -> int:
    """Multiply-accumulates of one forward pass on an ``input_h x input_w`` LR image.

    Convolutions count ``C_i*C_o*k*k`` per output pixel (low-rank weights are
    counted as the composed dense kernel actually applied), 1x1 projections
    ``C_i*C_o``, window attention ``2*C*w*w`` per pixel (scores and weighted
    sum), bilinear sampling 4 per tap per channel, and MFF weighting ``C`` per
    active branch. Normalisation, activations, softmax and weight composition
    are not counted.
    """
    return MDDN(cfg, seed=None).macs(input_h, input_w)


def tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    """Start offsets of ``tile``-long windows covering ``[0, n)`` with at least ``overlap`` shared."""
    if tile <= overlap:
        raise InputError(f"tile {tile} must exceed overlap {overlap}")
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, tile - overlap))
    return starts + [n - tile]


def _feather(length: int, ramp: int, lead: bool, trail: bool, margin: int = 0) -> np.ndarray:
    """Blend weights over ``ramp`` samples at shared edges.

    The outermost ``margin`` samples get zero weight (their receptive field is
    cut by the tile border) and the rest of the ramp is linear, so two mirrored
    ramps over the same overlap always sum to one.
    """
    w = np.ones(length)
    if ramp > 0:
        r = np.clip((np.arange(length) + 0.5 - margin) / (ramp - 2 * margin), 0.0, 1.0)
        if lead:
            w = np.minimum(w, r)
        if trail:
            w = np.minimum(w, r[::-1])
    return w


def upscale(model: MDDN, lr: np.ndarray, tile: int = 256, overlap: int = 16,
            row_offset: int = 0, full_height: int | None = None) -> np.ndarray:
    """Super-resolve one ``(3, H, W)`` LR image, clamped to [0, 1].

    Images larger than ``tile`` are processed in overlapping tiles, each given
    its own row offset into the panorama so the distortion map stays global;
    overlaps are blended with linear feathering that ignores the outer quarter
    of each overlap.
    """
    if lr.ndim != 3 or lr.shape[0] != 3:
        raise InputError(f"expected a (3, H, W) image, got {lr.shape}")
    _, h, w = lr.shape
    s = model.cfg.scale
    full_height = h if full_height is None else full_height
    ys, xs = tile_starts(h, tile, overlap), tile_starts(w, tile, overlap)
    if len(ys) == 1 and len(xs) == 1:
        return model.forward(lr[None], row_offset, full_height, clamp=True)[0].astype(np.float64)
    out = np.zeros((3, s * h, s * w))
    wsum = np.zeros((s * h, s * w))
    th, tw = min(tile, h), min(tile, w)
    ramp, margin = s * overlap, s * (overlap // 4)
    for y0 in ys:
        wy = _feather(s * th, ramp, y0 > 0, y0 + th < h, margin)
        for x0 in xs:
            wx = _feather(s * tw, ramp, x0 > 0, x0 + tw < w, margin)
            patch = lr[None, :, y0 : y0 + th, x0 : x0 + tw]
            sr = model.forward(patch, row_offset + y0, full_height, clamp=True)[0]
            wt = wy[:, None] * wx[None, :]
            out[:, s * y0 : s * (y0 + th), s * x0 : s * (x0 + tw)] += sr * wt
            wsum[s * y0 : s * (y0 + th), s * x0 : s * (x0 + tw)] += wt
    return out / wsum
