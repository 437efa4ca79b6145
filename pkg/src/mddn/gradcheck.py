"""Finite-difference suites for every differentiable op and module.

Each case builds ``(fn, inputs, options)`` on small random shapes, where
``fn(*inputs) -> (out, vjp)``. Modules are checked with all parameters
randomised (including the ones that start at zero) so every path carries
gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import numerics as N
from . import sampling as S
from .geometry import distortion_batch
from .model import MDDN, preset
from .numerics import finite_diff_check, module_as_op

GROUPS = ("numerics", "sampling", "layers", "model")
DEFAULT_THRESHOLD = {np.dtype(np.float64): 1e-6, np.dtype(np.float32): 1e-2}
# 64-bit suites probe in extended precision with the five-point stencil, so
# neither roundoff nor truncation approaches the threshold even for the tiny
# gradients deep inside the model; 32-bit keeps the plain defaults
STENCIL = {np.dtype(np.float64): {"eps": 1e-4, "order": 4, "probe_dtype": np.longdouble},
           np.dtype(np.float32): {}}


@dataclass
class CaseResult:
    group: str
    name: str
    error: float
    threshold: float
    seconds: float
    worst: dict

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.threshold)


def _fill(p: N.Parameter, values) -> None:
    p.value = np.asarray(values).astype(p.value.dtype)
    p.grad = np.zeros_like(p.value)


def randomize(module: N.Module, rng: np.random.Generator, scale: float = 0.2) -> N.Module:
    """Give zero-initialised parameters small random values and pin offsets off the grid.

    Offset heads are set so every sampling position sits near ``integer + 0.3``
    (final weights tiny, biases in [0.25, 0.35]); finite-difference steps then
    never cross the bilinear kinks at integer coordinates or the clamp border.
    """
    for _, p in module.named_parameters():
        if not np.any(p.value):
            _fill(p, rng.uniform(-scale, scale, p.value.shape))
    for m in module.modules():
        if isinstance(m, L.WarpOffsetNet):
            head = m.layers[-1]
            _fill(head.weight, rng.uniform(-5e-3, 5e-3, head.weight.shape))
            _fill(head.bias, rng.uniform(0.25, 0.35, head.bias.shape))
        elif isinstance(m, L.KernelOffsetNet):
            head = m.layers[-1].weight
            _fill(head.b, rng.uniform(-5e-3, 5e-3, head.b.shape))
            _fill(head.bias, rng.uniform(0.25, 0.35, head.bias.shape))
    return module


def _off_grid(values, margin=1e-2):
    """Push values at least ``margin`` away from integers."""
    frac = values - np.round(values)
    return np.where(np.abs(frac) < margin, values + 2 * margin * np.where(frac < 0, -1, 1), values)


def _dmap(n, h, w, dtype, row_offset=3, full_height=None):
    return distortion_batch(h, w, row_offset, full_height or h + 7, batch=n, dtype=dtype)


# -- numerics ------------------------------------------------------------------


def _c_pad(rng, dt):
    return (lambda x: N.pad2d(x, (1, 2, 2, 1), "reflect")), [rng.standard_normal((2, 2, 4, 5)).astype(dt)], {}


def _c_conv2d(rng, dt):
    x = rng.standard_normal((2, 3, 6, 7)).astype(dt)
    w = rng.standard_normal((4, 3, 3, 3)).astype(dt)
    b = rng.standard_normal(4).astype(dt)
    return (lambda x, w, b: N.conv2d(x, w, b, stride=1, pad=2, dilation=2)), [x, w, b], {}


def _c_matmul(rng, dt):
    return N.matmul, [rng.standard_normal((2, 3, 4)).astype(dt), rng.standard_normal((2, 4, 5)).astype(dt)], {}


def _c_softmax(rng, dt):
    return (lambda x: N.softmax(x, axis=-1)), [rng.standard_normal((3, 4, 5)).astype(dt)], {}


def _c_masked_softmax(rng, dt):
    mask = np.array([True, False, True, True])[None, :, None]
    return (lambda x: N.masked_softmax(x, mask, axis=1)), [rng.standard_normal((2, 4, 3)).astype(dt)], {}


def _c_leaky(rng, dt):
    x = rng.standard_normal((3, 17))
    x = np.where(np.abs(x) < 1e-2, x + 0.05, x)  # away from the kink
    return N.leaky_relu, [x.astype(dt)], {}


def _c_gelu(rng, dt):
    return N.gelu, [(2 * rng.standard_normal((3, 17))).astype(dt)], {}


def _c_layer_norm(rng, dt):
    x = rng.standard_normal((2, 5, 3, 4)).astype(dt)
    return N.layer_norm, [x, rng.standard_normal(5).astype(dt), rng.standard_normal(5).astype(dt)], {}


def _c_shuffle(rng, dt):
    return (lambda x: N.pixel_shuffle(x, 2)), [rng.standard_normal((2, 8, 3, 3)).astype(dt)], {}


def _c_unshuffle(rng, dt):
    return (lambda x: N.pixel_unshuffle(x, 2)), [rng.standard_normal((2, 2, 4, 6)).astype(dt)], {}


# -- sampling ----------------------------------------------------------------


def _c_bilinear(rng, dt):
    f = rng.standard_normal((2, 3, 5, 6)).astype(dt)
    # include out-of-range points, kept away from the clamp and integer kinks
    coords = _off_grid(rng.uniform(-1.5, 7.0, (2, 2, 4, 3))).astype(dt)
    return S.bilinear_sample, [f, coords], {}


def _c_warp(rng, dt):
    f = rng.standard_normal((2, 3, 5, 6)).astype(dt)
    off = _off_grid(rng.uniform(-1.7, 1.7, (2, 2, 5, 6))).astype(dt)
    return (lambda f, o: S.warp(f, S.OffsetField("warp", o))), [f, off], {}


def _c_deform_gather(rng, dt):
    f = rng.standard_normal((1, 2, 5, 6)).astype(dt)
    off = _off_grid(rng.uniform(-1.3, 1.3, (1, 18, 5, 6))).astype(dt)
    return (lambda f, o: S.deform_gather(f, S.OffsetField("kernel", o), dilation=2)), [f, off], {}


# -- layers ------------------------------------------------------------------


def _c_low_rank(rng, dt):
    a = rng.standard_normal((4, 2)).astype(dt)
    b = rng.standard_normal((5 * 9, 2)).astype(dt)
    return (lambda a, b: L.low_rank_compose(a, b, 5, 3)), [a, b], {}


def _module_case(module, forward, inputs, rng, max_coords=None):
    randomize(module, rng)
    fn, values = module_as_op(module, forward)
    return fn, list(inputs) + values, {"max_coords": max_coords}


def _c_d3c(rng, dt):
    m = L.DeformConv(3, 1, 2, 4, 3, rng, dt)
    x = rng.standard_normal((1, 3, 5, 6)).astype(dt)
    d = _dmap(1, 5, 6, dt)
    return _module_case(m, lambda x: m.forward(x, d), [x], rng)


def _c_d4c(rng, dt):
    m = L.D4C(3, 2, 2, 4, rng, dt)
    x = rng.standard_normal((1, 3, 5, 6)).astype(dt)
    d = _dmap(1, 5, 6, dt)
    return _module_case(m, lambda x: m.forward(x, d), [x], rng)


def _c_ddca(rng, dt):
    m = L.DDCA(4, 2, 3, 2, 4, rng, dt)
    x = rng.standard_normal((1, 4, 5, 4)).astype(dt)  # padded to 6x6 windows
    d = _dmap(1, 5, 4, dt)
    return _module_case(m, lambda x: m.forward(x, d), [x], rng)


def _c_mff(rng, dt):
    m = L.MFF(3, 3, [True, True, False], rng, dt)
    f = rng.standard_normal((1, 3, 4, 5)).astype(dt)
    b1 = rng.standard_normal((1, 3, 4, 5)).astype(dt)
    b2 = rng.standard_normal((1, 3, 4, 5)).astype(dt)

    randomize(m, rng)
    params = m.parameters()
    n_params = len(params)

    def fn(f, b1, b2, *values):
        saved = [p.value for p in params]
        for p, v in zip(params, values):
            p.value = v
        m.zero_grad()
        out = m.forward(f, [b1, b2, None])
        for p, v in zip(params, saved):
            p.value = v

        def vjp(g):
            gf, gb = m.backward(g)
            return [gf, gb[0], gb[1]] + [p.grad.copy() for p in params]

        return out, vjp

    return fn, [f, b1, b2] + [p.value for p in params], {}


def _c_mddl(rng, dt):
    m = L.MDDL(4, (1, 2, 3), 2, 2, 2, 3, ffn=True, rng=rng, dtype=dt)
    x = rng.standard_normal((1, 4, 4, 4)).astype(dt)
    d = _dmap(1, 4, 4, dt)
    return _module_case(m, lambda x: m.forward(x, d), [x], rng, max_coords=6)


# -- model ---------------------------------------------------------------------


def _c_model(rng, dt):
    cfg = preset("tiny", scale=2)
    m = MDDN(cfg, seed=int(rng.integers(1 << 31)), dtype=dt)  # fan-in scaled init
    x = rng.uniform(0, 1, (1, 3, 5, 6)).astype(dt)
    return _module_case(m, lambda x: m.forward(x, row_offset=2, full_height=12), [x], rng, max_coords=2)


CASES: dict[str, list[tuple[str, Callable]]] = {
    "numerics": [
        ("pad2d", _c_pad),
        ("conv2d", _c_conv2d),
        ("matmul", _c_matmul),
        ("softmax", _c_softmax),
        ("masked_softmax", _c_masked_softmax),
        ("leaky_relu", _c_leaky),
        ("gelu", _c_gelu),
        ("layer_norm", _c_layer_norm),
        ("pixel_shuffle", _c_shuffle),
        ("pixel_unshuffle", _c_unshuffle),
    ],
    "sampling": [
        ("bilinear_sample", _c_bilinear),
        ("warp", _c_warp),
        ("deform_gather", _c_deform_gather),
    ],
    "layers": [
        ("low_rank_compose", _c_low_rank),
        ("d3c", _c_d3c),
        ("d4c", _c_d4c),
        ("ddca", _c_ddca),
        ("mff", _c_mff),
        ("mddl", _c_mddl),
    ],
    "model": [("tiny_model", _c_model)],
}


def run(groups=GROUPS, dtype=np.float64, seed: int = 0, threshold: float | None = None,
        progress: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    dtype = np.dtype(dtype)
    thr = DEFAULT_THRESHOLD[dtype] if threshold is None else threshold
    results = []
    for group in groups:
        for i, (name, build) in enumerate(CASES[group]):
            rng = np.random.default_rng((seed, GROUPS.index(group), i))
            t0 = time.perf_counter()
            fn, inputs, opts = build(rng, dtype)
            worst: dict = {}
            err = finite_diff_check(fn, inputs, seed=seed, report=worst, **STENCIL[dtype], **opts)
            res = CaseResult(group, name, err, thr, time.perf_counter() - t0, worst)
            results.append(res)
            if progress is not None:
                progress(res)
    return results
