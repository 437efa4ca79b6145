"""Sphere <-> plane mapping and the latitude distortion map of ERP images.

Angles are radians everywhere. Only the equirectangular projection (ERP) is
supported; the generic Jacobian helpers exist so the stretching ratio can be
evaluated for an arbitrary mapping, but nothing else consumes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError

SUPPORTED_PROJECTIONS = ("erp",)


class SphericalCoord(NamedTuple):
    theta: float  # longitude, open interval (-pi, pi)
    phi: float  # latitude, open interval (-pi/2, pi/2)


class PlaneCoord(NamedTuple):
    x: float
    y: float


def _check_sphere(theta, phi):
    if not (-math.pi < theta < math.pi):
        raise InputError(f"longitude {theta!r} outside (-pi, pi)")
    if not (-math.pi / 2 < phi < math.pi / 2):
        raise InputError(f"latitude {phi!r} outside (-pi/2, pi/2)")


def check_projection(name: str) -> str:
    if name not in SUPPORTED_PROJECTIONS:
        raise ConfigError(f"projection {name!r} is not supported (only 'erp')")
    return name


def erp_project(p: SphericalCoord) -> PlaneCoord:
    theta, phi = p
    _check_sphere(theta, phi)
    return PlaneCoord(float(theta), float(phi))


def erp_unproject(q: PlaneCoord) -> SphericalCoord:
    x, y = q
    _check_sphere(x, y)
    return SphericalCoord(float(x), float(y))


def jacobian_determinant(
    mapping: Callable[[float, float], tuple[float, float]],
    theta: float,
    phi: float,
    step: float = 1e-6,
) -> float:
    """Central-difference determinant of d(x, y) / d(theta, phi) for ``mapping``."""
    xt1, yt1 = mapping(theta + step, phi)
    xt0, yt0 = mapping(theta - step, phi)
    xp1, yp1 = mapping(theta, phi + step)
    xp0, yp0 = mapping(theta, phi - step)
    dx_dt = (xt1 - xt0) / (2 * step)
    dy_dt = (yt1 - yt0) / (2 * step)
    dx_dp = (xp1 - xp0) / (2 * step)
    dy_dp = (yp1 - yp0) / (2 * step)
    return dx_dt * dy_dp - dx_dp * dy_dt


def jacobian_stretch(phi: float, jac_abs: float) -> float:
    """Spherical-to-planar area ratio cos(phi) / |J|."""
    if not jac_abs > 0:
        raise InputError(f"|J| must be positive, got {jac_abs!r}")
    if not (-math.pi / 2 < phi < math.pi / 2):
        raise InputError(f"latitude {phi!r} outside (-pi/2, pi/2)")
    return math.cos(phi) / jac_abs


def erp_stretch(theta: float, phi: float) -> float:
    jac = jacobian_determinant(lambda t, p: tuple(erp_project(SphericalCoord(t, p))), theta, phi)
    return jacobian_stretch(phi, abs(jac))


@dataclass(frozen=True)
class DistortionMap:
    height: int
    width: int
    row_offset: int
    full_height: int
    values: np.ndarray  # (height, width), float64

    @property
    def rows(self) -> np.ndarray:
        return self.values[:, 0]


def row_weights(height: int, row_offset: int, full_height: int) -> np.ndarray:
    """Per-row cos-latitude weights for rows ``row_offset .. row_offset+height-1``."""
    h = row_offset + np.arange(height, dtype=np.float64)
    return np.cos((h + 0.5 - full_height / 2) * np.pi / full_height)


def _check_window(height, width, row_offset, full_height):
    if height < 1 or width < 1 or full_height < 1:
        raise InputError(f"map dimensions must be positive, got {height}x{width} of {full_height}")
    if row_offset < 0 or row_offset + height > full_height:
        raise InputError(
            f"rows [{row_offset}, {row_offset + height}) fall outside a {full_height}-row ERP image"
        )


def distortion_map(height: int, width: int, row_offset: int = 0, full_height: int | None = None) -> DistortionMap:
    if full_height is None:
        full_height = height
    _check_window(height, width, row_offset, full_height)
    rows = row_weights(height, row_offset, full_height)
    values = np.repeat(rows[:, None], width, axis=1)
    values.setflags(write=False)
    return DistortionMap(height, width, row_offset, full_height, values)


def distortion_batch(
    height: int,
    width: int,
    row_offsets: int | Sequence[int],
    full_height: int,
    batch: int | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Stack distortion maps into an ``(N, 1, H, W)`` network input.

    ``row_offsets`` is either one offset shared by every item or one per item.
    """
    offsets = np.atleast_1d(np.asarray(row_offsets, dtype=np.int64))
    if batch is not None and offsets.size == 1:
        offsets = np.repeat(offsets, batch)
    if batch is not None and offsets.size != batch:
        raise InputError(f"{offsets.size} row offsets for a batch of {batch}")
    out = np.empty((offsets.size, 1, height, width), dtype=dtype)
    for i, r in enumerate(offsets):
        _check_window(height, width, int(r), full_height)
        out[i, 0] = row_weights(height, int(r), full_height)[:, None]
    return out
