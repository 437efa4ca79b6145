"""Bilinear sampling at continuous coordinates, with coordinate gradients.

Coordinates are absolute pixel positions ``(x, y)`` with ``x`` along the width.
Out-of-range coordinates are clamped to ``[0, W-1] x [0, H-1]`` before
interpolation (replicate border), so every output is a convex combination of
input pixels. At exactly-integer coordinates the coordinate gradient is the
right-sided derivative.

Each sampling call builds three sparse matrices over the flattened map: the
interpolation weights and their x/y derivatives. Forward, feature gradient
and coordinate gradient are then products with those matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InputError

KINDS = ("warp", "kernel")


@dataclass(frozen=True)
class OffsetField:
    """Per-pixel displacements in pixels.

    ``warp`` fields have 2 channels ``(dx, dy)``; ``kernel`` fields have
    ``2*k*k`` channels ordered tap-major, each tap holding an ``(dx, dy)`` pair,
    taps enumerated row-major over the kernel window.
    """

    kind: str
    values: np.ndarray  # (N, channels, H, W)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown offset kind {self.kind!r}")
        if self.values.ndim != 4:
            raise InputError(f"offset field must be 4-D, got shape {self.values.shape}")
        c = self.values.shape[1]
        if self.kind == "warp" and c != 2:
            raise InputError(f"warp offsets need 2 channels, got {c}")
        if self.kind == "kernel" and (c % 2 or round((c // 2) ** 0.5) ** 2 != c // 2):
            raise InputError(f"kernel offsets need 2*k*k channels, got {c}")

    @property
    def kernel(self) -> int:
        return int(round((self.values.shape[1] // 2) ** 0.5))


def _interp_matrices(x, y, h, w):
    """Sparse ``(N*P, N*H*W)`` interpolation matrix and its x / y derivatives.

    Every row holds the four bilinear taps of one sample, so the CSR arrays
    are written directly (duplicate column indices at the border are summed
    by the sparse products).
    """
    n, p = x.shape
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    mx = ((x >= 0) & (x < w - 1)).astype(x.dtype)
    my = ((y >= 0) & (y < h - 1)).astype(y.dtype)
    x0f = np.floor(xc)
    y0f = np.floor(yc)
    ax = xc - x0f
    ay = yc - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    base = (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    r0 = base + y0 * w
    r1 = base + y1 * w
    indices = np.stack([r0 + x0, r0 + x1, r1 + x0, r1 + x1], axis=-1).reshape(-1)
    bx, by = 1 - ax, 1 - ay
    val = np.stack([bx * by, ax * by, bx * ay, ax * ay], axis=-1).reshape(-1)
    dx = np.stack([-by, by, -ay, ay], axis=-1).reshape(-1)
    dy = np.stack([-bx, -ax, bx, ax], axis=-1).reshape(-1)
    indptr = np.arange(0, 4 * n * p + 1, 4, dtype=np.int64)
    shape = (n * p, n * h * w)
    mats = [sp.csr_matrix((v, indices, indptr), shape=shape) for v in (val, dx, dy)]
    return mats, mx, my


def bilinear_sample(f: np.ndarray, coords: np.ndarray):
    """Sample ``f (N,C,H,W)`` at ``coords (N,2,*S)``; returns ``(N,C,*S)`` and a vjp.

    ``vjp(g)`` returns ``(grad_f, grad_coords)``.
    """
    if f.ndim != 4 or f.size == 0:
        raise InputError(f"feature map must be a non-empty 4-D array, got {f.shape}")
    n, c, h, w = f.shape
    if coords.ndim < 2 or coords.shape[0] != n or coords.shape[1] != 2:
        raise InputError(f"coords shape {coords.shape} incompatible with features {f.shape}")
    if not np.all(np.isfinite(coords)):
        raise InputError("sampling coordinates must be finite")
    sshape = coords.shape[2:]
    p = int(np.prod(sshape))
    x = coords[:, 0].reshape(n, p)
    y = coords[:, 1].reshape(n, p)
    (m_val, m_dx, m_dy), mx, my = _interp_matrices(x, y, h, w)
    ft = np.ascontiguousarray(f.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    out_t = np.asarray(m_val @ ft)  # (N*P, C)
    out = np.ascontiguousarray(out_t.reshape(n, p, c).transpose(0, 2, 1)).reshape((n, c) + sshape)

    def vjp(g):
        gt = np.ascontiguousarray(g.reshape(n, c, p).transpose(0, 2, 1)).reshape(n * p, c)
        gf = np.asarray(m_val.T @ gt).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gx = np.einsum("ij,ij->i", np.asarray(m_dx @ ft), gt).reshape(n, p) * mx
        gy = np.einsum("ij,ij->i", np.asarray(m_dy @ ft), gt).reshape(n, p) * my
        gcoords = np.stack([gx, gy], axis=1).reshape(coords.shape).astype(coords.dtype, copy=False)
        return np.ascontiguousarray(gf, dtype=f.dtype), gcoords

    return out, vjp


def base_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Regular pixel grid as ``(2, H, W)`` absolute ``(x, y)`` coordinates."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([xs, ys])


def warp(f: np.ndarray, offsets: OffsetField):
    """Resample ``f`` at ``grid + offsets``; vjp returns ``(grad_f, grad_offsets)``."""
    if offsets.kind != "warp":
        raise InputError(f"warp needs a 'warp' offset field, got {offsets.kind!r}")
    off = offsets.values
    if off.shape[0] != f.shape[0] or off.shape[2:] != f.shape[2:]:
        raise InputError(f"offsets {off.shape} do not match features {f.shape}")
    coords = base_grid(f.shape[2], f.shape[3], off.dtype)[None] + off
    return bilinear_sample(f, coords)


def kernel_taps(kernel: int, dilation: int) -> np.ndarray:
    """Nominal ``(dx, dy)`` displacement of each tap, tap-major row-major, ``(K, 2)``."""
    r = np.arange(kernel) - (kernel - 1) // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1) * dilation


def deform_gather(f: np.ndarray, offsets: OffsetField, dilation: int = 1, kernel: int = 3):
    """Deformable im2col: ``(N, C*K, H, W)`` columns, channel index ``c*K + k``.

    vjp returns ``(grad_f, grad_offsets)``.
    """
    if offsets.kind != "kernel":
        raise InputError(f"deform_gather needs a 'kernel' offset field, got {offsets.kind!r}")
    if dilation < 1:
        raise InputError("dilation must be >= 1")
    n, c, h, w = f.shape
    k2 = kernel * kernel
    off = offsets.values
    if off.shape != (n, 2 * k2, h, w):
        raise InputError(f"offsets {off.shape} do not match features {f.shape} with {k2} taps")
    taps = kernel_taps(kernel, dilation).astype(off.dtype)  # (K, 2)
    grid = base_grid(h, w, off.dtype)  # (2, H, W)
    off5 = off.reshape(n, k2, 2, h, w)
    coords = grid[None, None] + taps[None, :, :, None, None] + off5  # (N, K, 2, H, W)
    coords = coords.transpose(0, 2, 1, 3, 4)  # (N, 2, K, H, W)
    cols, sample_vjp = bilinear_sample(f, coords)
    out = cols.reshape(n, c * k2, h, w)

    def vjp(g):
        gf, gc = sample_vjp(g.reshape(n, c, k2, h, w))
        goff = gc.transpose(0, 2, 1, 3, 4).reshape(n, 2 * k2, h, w)
        return gf, goff

    return out, vjp
