"""PSNR / SSIM and their sphere-weighted (cos-latitude) variants.

Images are arrays shaped ``(..., H, W)`` with values in ``[0, max_val]``; any
leading axes (channels, batch) are averaged jointly. Sphere weights are the
ERP distortion map rows, so patches must state where they sit in the full
image (``row_offset`` of ``full_height`` rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError
from .geometry import row_weights

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    ws_psnr: float
    ws_ssim: float


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise InputError("images need at least two (spatial) axes")
    return a, b


def _psnr_from_mse(mse, max_val):
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val * max_val / mse))


def _sphere_rows(h, row_offset, full_height, uniform):
    if uniform:
        return np.ones(h)
    if full_height is None:
        full_height = h
    if row_offset < 0 or row_offset + h > full_height:
        raise InputError(f"rows [{row_offset}, {row_offset + h}) outside a {full_height}-row ERP image")
    return row_weights(h, row_offset, full_height)


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), max_val)


def ws_psnr(a, b, full_height: int | None = None, row_offset: int = 0, max_val: float = 1.0,
            uniform: bool = False) -> float:
    """Sphere-weighted PSNR. ``uniform=True`` replaces the cos weights by ones."""
    a, b = _check_pair(a, b)
    w = _sphere_rows(a.shape[-2], row_offset, full_height, uniform)[:, None]
    err = (a - b) ** 2
    err = err.reshape((-1,) + err.shape[-2:])
    wmse = float(np.sum(err * w) / (np.sum(np.broadcast_to(w, err.shape[-2:])) * err.shape[0]))
    return _psnr_from_mse(wmse, max_val)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' Gaussian filtering over the last two axes."""
    k = g.size
    x = sliding_window_view(x, k, axis=-1) @ g
    x = sliding_window_view(x, k, axis=-2) @ g
    return x


def ssim_map(a, b, max_val: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM over the valid region, shape ``(..., H-10, W-10)``."""
    a, b = _check_pair(a, b)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise InputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2:]}")
    g = gaussian_window()
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, max_val: float = 1.0) -> float:
    return float(np.mean(ssim_map(a, b, max_val)))


def ws_ssim(a, b, full_height: int | None = None, row_offset: int = 0, max_val: float = 1.0,
            uniform: bool = False) -> float:
    """SSIM map averaged with the cos-latitude weight of each window centre row."""
    m = ssim_map(a, b, max_val)
    h = np.asarray(a).shape[-2]
    half = SSIM_WINDOW // 2
    w = _sphere_rows(h, row_offset, full_height, uniform)[half : h - half][:, None]
    m = m.reshape((-1,) + m.shape[-2:])
    wfull = np.broadcast_to(w, m.shape[-2:])
    return float(np.sum(m * w) / (np.sum(wfull) * m.shape[0]))


def rgb_to_y(img) -> np.ndarray:
    """BT.601 luma of a ``(3, H, W)`` RGB image in [0, 1], result in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def evaluate(sr, gt, full_height=None, row_offset=0, y_channel=False, crop_border=0) -> MetricReport:
    """All four metrics for one ``(3, H, W)`` pair."""
    sr, gt = _check_pair(sr, gt)
    if full_height is None:
        full_height = sr.shape[-2]
    if y_channel:
        sr, gt = rgb_to_y(sr), rgb_to_y(gt)
    if crop_border:
        c = crop_border
        sr = sr[..., c:-c, c:-c]
        gt = gt[..., c:-c, c:-c]
        row_offset += c
    return MetricReport(
        psnr=psnr(sr, gt),
        ssim=ssim(sr, gt),
        ws_psnr=ws_psnr(sr, gt, full_height, row_offset),
        ws_ssim=ws_ssim(sr, gt, full_height, row_offset),
    )
