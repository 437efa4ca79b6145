"""ERP image I/O, bicubic degradation, latitude-aware patch sampling, datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

from .errors import FormatError, InputError

SUPPORTED_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


@dataclass
class ErpImage:
    data: np.ndarray  # (3, H, W) float64 in [0, 1]
    bit_depth: int = 8

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def full_erp(self) -> bool:
        return self.width == 2 * self.height


@dataclass(frozen=True)
class PatchPair:
    hr_patch: np.ndarray  # (3, P, P)
    lr_patch: np.ndarray  # (3, P/s, P/s)
    hr_row_offset: int
    scale: int
    full_height: int  # rows of the full HR image
    flipped: bool = False

    @property
    def lr_row_offset(self) -> int:
        return self.hr_row_offset // self.scale


# ----------------------------------------------------------------------------
# I/O


def load_image(path) -> ErpImage:
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise FormatError(f"unsupported image format {path.suffix!r} for {path}")
    if not path.is_file():
        raise FormatError(f"no such image file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"could not decode {path} (corrupt or truncated)")
    if raw.dtype == np.uint8:
        depth, maxval = 8, 255.0
    elif raw.dtype == np.uint16:
        depth, maxval = 16, 65535.0
    else:
        raise FormatError(f"unsupported sample type {raw.dtype} in {path}")
    if raw.ndim == 2:
        rgb = np.repeat(raw[None], 3, axis=0)
    elif raw.shape[2] in (3, 4):
        rgb = raw[:, :, 2::-1].transpose(2, 0, 1)  # BGR(A) -> RGB
    else:
        raise FormatError(f"unsupported channel count {raw.shape[2]} in {path}")
    return ErpImage(rgb.astype(np.float64) / maxval, depth)


def quantize(values, bits: int = 8) -> np.ndarray:
    """Round-half-up quantisation of [0, 1] values to unsigned integers."""
    maxval = (1 << bits) - 1
    q = np.floor(np.clip(values, 0.0, 1.0) * maxval + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def save_image(img, path, bits: int | None = None) -> None:
    """Write a ``(3, H, W)`` (or ``(H, W)``) [0, 1] image as PNG / PPM."""
    if isinstance(img, ErpImage):
        bits = bits or img.bit_depth
        img = img.data
    bits = bits or 8
    if bits not in (8, 16):
        raise InputError("bit depth must be 8 or 16")
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise FormatError(f"unsupported image format {path.suffix!r}")
    q = quantize(np.asarray(img), bits)
    if q.ndim == 3:
        q = q.transpose(1, 2, 0)[:, :, ::-1]  # RGB -> BGR
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise FormatError(f"could not write {path}")


# ----------------------------------------------------------------------------
# resampling


def cubic_kernel(x, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (Catmull-Rom for ``a = -0.5``)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric (edge-repeating) reflection of indices into ``[0, n)``."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic resampling matrix, anti-aliased when shrinking."""
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centers[:, None] - idx) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), _mirror(idx, n_in).ravel()), weights.ravel())
    return m


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of ``(..., H, W)``."""
    my = resize_matrix(img.shape[-2], out_h)
    mx = resize_matrix(img.shape[-1], out_w)
    return my @ img @ mx.T


def degrade(hr, s: int):
    """Bicubic ``s``-fold downsampling (Catmull-Rom, pre-filter stretched by ``s``)."""
    data = hr.data if isinstance(hr, ErpImage) else np.asarray(hr, dtype=np.float64)
    h, w = data.shape[-2:]
    if s < 1 or h % s or w % s:
        raise InputError(f"image {h}x{w} not divisible by scale {s}")
    out = data.copy() if s == 1 else resize(data, h // s, w // s)
    return ErpImage(out, hr.bit_depth) if isinstance(hr, ErpImage) else out


def upsample_bicubic(lr, s: int) -> np.ndarray:
    data = lr.data if isinstance(lr, ErpImage) else np.asarray(lr, dtype=np.float64)
    h, w = data.shape[-2:]
    return data.copy() if s == 1 else resize(data, h * s, w * s)


# ----------------------------------------------------------------------------
# patches


def sample_patch(hr, lr, P: int, s: int, rng_seed) -> PatchPair:
    """Aligned random HR/LR crop with an optional horizontal flip.

    The HR top row is a multiple of ``s`` so LR rows map exactly; vertical
    flips and rotations are never applied (they would move latitudes).
    """
    hr = hr.data if isinstance(hr, ErpImage) else hr
    lr = lr.data if isinstance(lr, ErpImage) else lr
    if P % s:
        raise InputError(f"patch size {P} not divisible by scale {s}")
    H, W = hr.shape[-2:]
    if lr.shape[-2:] != (H // s, W // s):
        raise InputError(f"LR image {lr.shape[-2:]} is not the x{s} reduction of {hr.shape[-2:]}")
    if P > H or P > W:
        raise InputError(f"patch {P} larger than image {H}x{W}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    top = int(rng.integers(0, (H - P) // s + 1)) * s
    left = int(rng.integers(0, (W - P) // s + 1)) * s
    flip = bool(rng.integers(0, 2))
    p = P // s
    hr_patch = hr[:, top : top + P, left : left + P]
    lr_patch = lr[:, top // s : top // s + p, left // s : left // s + p]
    if flip:
        hr_patch = hr_patch[:, :, ::-1]
        lr_patch = lr_patch[:, :, ::-1]
    return PatchPair(np.ascontiguousarray(hr_patch), np.ascontiguousarray(lr_patch), top, s, H, flip)


# ----------------------------------------------------------------------------
# datasets


def read_manifest(path) -> list[str]:
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


class ErpDataset:
    """HR images listed in ``manifest.txt`` under ``root`` with on-demand LR copies.

    LR images are produced by ``degrader`` (bicubic by default) and cached as
    ``.npy`` under ``root/cache/x{s}/`` when ``disk_cache`` is set.
    """

    def __init__(self, root, scale: int, manifest: str = "manifest.txt",
                 degrader: Callable = degrade, disk_cache: bool = False):
        self.root = Path(root)
        manifest_path = self.root / manifest
        if not manifest_path.is_file():
            raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
        self.names = read_manifest(manifest_path)
        if not self.names:
            raise InputError(f"empty manifest {manifest_path}")
        self.scale = scale
        self.degrader = degrader
        self.disk_cache = disk_cache
        self._hr: dict[int, np.ndarray] = {}
        self._lr: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.names)

    def hr(self, i: int) -> np.ndarray:
        if i not in self._hr:
            self._hr[i] = load_image(self.root / self.names[i]).data
        return self._hr[i]

    def lr(self, i: int) -> np.ndarray:
        if i not in self._lr:
            cache = self.root / "cache" / f"x{self.scale}" / (Path(self.names[i]).stem + ".npy")
            if self.disk_cache and cache.is_file():
                self._lr[i] = np.load(cache)
            else:
                self._lr[i] = self.degrader(self.hr(i), self.scale)
                if self.disk_cache:
                    cache.parent.mkdir(parents=True, exist_ok=True)
                    np.save(cache, self._lr[i])
        return self._lr[i]

    def pair(self, i):
        return self.hr(i), self.lr(i)


@dataclass
class PatchBatch:
    lr: np.ndarray  # (N, 3, p, p)
    hr: np.ndarray  # (N, 3, P, P)
    lr_row_offsets: np.ndarray  # (N,)
    lr_full_height: int
    seed: tuple = ()


class PatchSampler:
    """Deterministic batches: batch ``step`` depends only on ``(seed, step)``."""

    def __init__(self, dataset: ErpDataset, indices: Sequence[int], patch: int, batch: int, seed: int):
        self.dataset = dataset
        self.indices = list(indices)
        if not self.indices:
            raise InputError("no training images")
        self.patch, self.batch, self.seed = patch, batch, seed

    def batch_at(self, step: int) -> PatchBatch:
        seed = (self.seed, step)
        rng = np.random.default_rng(seed)
        s = self.dataset.scale
        lrs, hrs, rows, fulls = [], [], [], []
        for _ in range(self.batch):
            i = self.indices[int(rng.integers(len(self.indices)))]
            hr, lr = self.dataset.pair(i)
            pp = sample_patch(hr, lr, self.patch, s, rng)
            lrs.append(pp.lr_patch)
            hrs.append(pp.hr_patch)
            rows.append(pp.lr_row_offset)
            fulls.append(lr.shape[1])
        if len(set(fulls)) != 1:
            raise InputError("all training images must share one height")
        return PatchBatch(np.stack(lrs), np.stack(hrs), np.asarray(rows), fulls[0], seed)


def validation_patches(dataset: ErpDataset, indices: Sequence[int], patch: int, per_image: int, seed: int):
    """Fixed held-out crops (no flips), reproducible from ``seed``."""
    out = []
    s = dataset.scale
    rng = np.random.default_rng((seed, 0xC0FFEE))
    for i in indices:
        hr, lr = dataset.pair(i)
        H, W = hr.shape[-2:]
        for _ in range(per_image):
            top = int(rng.integers(0, (H - patch) // s + 1)) * s
            left = int(rng.integers(0, (W - patch) // s + 1)) * s
            p = patch // s
            out.append(PatchPair(
                hr[:, top : top + patch, left : left + patch].copy(),
                lr[:, top // s : top // s + p, left // s : left // s + p].copy(),
                top, s, H,
            ))
    return out


# ----------------------------------------------------------------------------
# synthetic panoramas


def synth_erp(height: int, seed: int, supersample: int = 3) -> np.ndarray:
    """Procedural ``(3, H, 2H)`` ERP panorama rendered from a scene on the sphere.

    The scene is a sky/ground gradient plus random spherical caps that are
    flat-coloured, striped or checkered, so the picture carries sharp,
    latitude-stretched edges. Pixels are box-filtered over a
    ``supersample x supersample`` grid.
    """
    rng = np.random.default_rng(seed)
    H, W = height, 2 * height
    ss = supersample
    v = (np.arange(H * ss) + 0.5) / (H * ss)
    u = (np.arange(W * ss) + 0.5) / (W * ss)
    phi = (0.5 - v)[:, None] * np.pi  # latitude, +pi/2 at the top row
    theta = (u - 0.5)[None, :] * 2 * np.pi
    cos_phi = np.cos(phi)
    dirs = np.stack(np.broadcast_arrays(cos_phi * np.cos(theta), cos_phi * np.sin(theta), np.sin(phi) + 0 * theta))

    sky, ground = rng.uniform(0.3, 0.9, 3), rng.uniform(0.1, 0.6, 3)
    t = (np.sin(phi) + 1) / 2
    img = ground[:, None, None] * (1 - t) + sky[:, None, None] * t
    img = np.broadcast_to(img, (3,) + dirs.shape[1:]).copy()

    for _ in range(int(rng.integers(10, 16))):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        radius = rng.uniform(0.15, 0.6)
        cosang = np.tensordot(c, dirs, axes=1)
        inside = cosang > np.cos(radius)
        color_a, color_b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        kind = rng.integers(3)
        if kind == 0:
            pattern = np.ones_like(cosang, dtype=bool)
        else:
            # local tangent frame around the cap centre
            e1 = np.cross(c, [0.0, 0.0, 1.0] if abs(c[2]) < 0.9 else [1.0, 0.0, 0.0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(c, e1)
            a = np.tensordot(e1, dirs, axes=1)
            b = np.tensordot(e2, dirs, axes=1)
            freq = rng.uniform(12, 40)
            if kind == 1:
                pattern = np.sin(freq * a) > 0
            else:
                pattern = (np.sin(freq * a) > 0) ^ (np.sin(freq * b) > 0)
        col = np.where(pattern[None], color_a[:, None, None], color_b[:, None, None])
        img = np.where(inside[None], col, img)

    img = img.reshape(3, H, ss, W, ss).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0)


def write_synthetic_dataset(root, n_images: int, height: int, seed: int = 0) -> Path:
    """Write ``n_images`` synthetic panoramas plus ``manifest.txt`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for k in range(n_images):
        name = f"pano_{k:03d}.png"
        save_image(synth_erp(height, seed * 1000 + k), root / name)
        names.append(name)
    (root / "manifest.txt").write_text("\n".join(names) + "\n")
    return root
