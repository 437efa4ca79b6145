"""Dense-tensor operations with hand-written backward rules.

Every differentiable op returns ``(output, vjp)``; ``vjp(cotangent)`` returns
the gradients of the op's array arguments in argument order. Tensors are plain
``numpy`` arrays (NCHW for feature maps). Module-level state lives in
``Parameter`` objects owned by ``Module`` trees; gradients accumulate into
``Parameter.grad`` during ``Module.backward``.
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, InputError

LEAKY_SLOPE = 0.1
LN_EPS = 1e-6
_SQRT2 = 2.0**0.5
_INV_SQRT_2PI = (2.0 * 3.141592653589793) ** -0.5


# ----------------------------------------------------------------------------
# padding


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    if mode == "reflect" and n == 1:
        mode = "edge"
    return np.pad(np.arange(n), (before, after), mode=mode)


def _fold_axis(g: np.ndarray, idx: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Transpose of gathering ``idx`` along ``axis``: sum cotangent rows back."""
    onehot = np.zeros((idx.size, n), dtype=g.dtype)
    onehot[np.arange(idx.size), idx] = 1
    g = np.moveaxis(g, axis, -1)
    return np.moveaxis(g @ onehot, -1, axis)


def pad2d(x: np.ndarray, pad: tuple[int, int, int, int], mode: str = "zeros"):
    """Pad the last two axes by (top, bottom, left, right).

    ``mode`` is one of ``zeros``, ``edge`` (replicate) or ``reflect``.
    """
    top, bottom, left, right = pad
    H, W = x.shape[-2:]
    if mode == "zeros":
        out = np.zeros(x.shape[:-2] + (H + top + bottom, W + left + right), dtype=x.dtype)
        out[..., top : top + H, left : left + W] = x

        def vjp(g):
            return (g[..., top : top + H, left : left + W],)

        return out, vjp
    if mode not in ("edge", "reflect"):
        raise InputError(f"unknown padding mode {mode!r}")
    ih = _pad_index(H, top, bottom, mode)
    iw = _pad_index(W, left, right, mode)
    out = x[..., ih[:, None], iw[None, :]]

    def vjp(g):
        g = _fold_axis(g, iw, W, g.ndim - 1)
        return (_fold_axis(g, ih, H, g.ndim - 2),)

    return out, vjp


# ----------------------------------------------------------------------------
# convolution


def conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Gather ``k x k`` taps of a padded map into ``(N, C, k*k, ho, wo)``."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i * k + j] = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols


def col2im(gcols: np.ndarray, shape, k: int, stride: int, dilation: int) -> np.ndarray:
    n, c, hp, wp = shape
    ho, wo = gcols.shape[-2:]
    gxp = np.zeros(shape, dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += gcols[:, :, i * k + j]
    return gxp


def project_columns(cols: np.ndarray, w2d: np.ndarray, b: np.ndarray | None):
    """Per-pixel contraction of gathered columns ``(N, K, H, W)`` with ``(C_o, K)``."""
    n, kdim, h, wd = cols.shape
    c2 = cols.reshape(n, kdim, h * wd)
    out = np.matmul(w2d, c2)
    if b is not None:
        out += b[None, :, None]
    out = out.reshape(n, w2d.shape[0], h, wd)

    def vjp(g):
        g2 = g.reshape(n, w2d.shape[0], h * wd)
        gcols = np.matmul(w2d.T, g2).reshape(cols.shape)
        gw = g2[0] @ c2[0].T
        for i in range(1, n):
            gw += g2[i] @ c2[i].T
        gb = g2.sum(axis=(0, 2)) if b is not None else None
        return gcols, gw, gb

    return out, vjp


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0, dilation: int = 1, padding_mode: str = "zeros"):
    """Dilated 2-D cross-correlation, ``x (N,C_i,H,W) * w (C_o,C_i,k,k) + b``."""
    if x.ndim != 4 or w.ndim != 4:
        raise InputError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, ci, h, wd = x.shape
    co, wci, k, k2 = w.shape
    if wci != ci or k != k2:
        raise InputError(f"weight {w.shape} does not match input channels {ci}")
    if b is not None and b.shape != (co,):
        raise InputError(f"bias shape {b.shape} != ({co},)")
    if dilation < 1 or stride < 1:
        raise InputError("stride and dilation must be >= 1")
    ho = conv_out_size(h, k, stride, pad, dilation)
    wo = conv_out_size(wd, k, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise InputError("convolution output would be empty")
    xp, pad_vjp = pad2d(x, (pad, pad, pad, pad), padding_mode) if pad else (x, None)
    cols = im2col(xp, k, stride, dilation, ho, wo).reshape(n, ci * k * k, ho, wo)
    out, proj_vjp = project_columns(cols, w.reshape(co, -1), b)

    def vjp(g):
        gcols, gw, gb = proj_vjp(g)
        gxp = col2im(gcols.reshape(n, ci, k * k, ho, wo), xp.shape, k, stride, dilation)
        gx = pad_vjp(gxp)[0] if pad_vjp else gxp
        return gx, gw.reshape(w.shape), gb

    return out, vjp


# ----------------------------------------------------------------------------
# dense algebra


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a, b)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        # undo broadcasting over leading axes
        while ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        while gb.ndim > b.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return out, vjp


def softmax(x, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return y, vjp


def masked_softmax(x, mask, axis: int = -1):
    """Softmax restricted to positions where ``mask`` is true; others get exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0).astype(x.dtype, copy=False)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return y, vjp


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    pos = x >= 0
    out = np.where(pos, x, x * slope)

    def vjp(g):
        return (np.where(pos, g, g * slope),)

    return out, vjp


def _erf(x):
    """``erf`` in the precision of ``x``; scipy covers float32/64, a series covers long double."""
    if x.dtype != np.longdouble or np.finfo(np.longdouble).eps >= np.finfo(np.float64).eps:
        return erf(x)
    # erf(x) = 2/sqrt(pi) e^{-x^2} sum_n (2x^2)^n x / (2n+1)!!, all terms positive
    ax = np.minimum(np.abs(x), 7)  # erfc(7) is below long double resolution
    two_x2 = 2 * ax * ax
    term = ax.copy()
    total = ax.copy()
    for n in range(1, 260):
        term = term * two_x2 / (2 * n + 1)
        total = total + term
    two_over_sqrt_pi = 2 / np.sqrt(4 * np.arctan(np.longdouble(1)))
    return np.sign(x) * two_over_sqrt_pi * np.exp(-ax * ax) * total


def gelu(x):
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return out, vjp


def activation(x, kind: str):
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "gelu":
        return gelu(x)
    raise InputError(f"unknown activation {kind!r}")


def layer_norm(x, gamma, beta, axis: int = 1):
    """Normalise over ``axis`` (channels for NCHW); affine parameters have shape (C,)."""
    c = x.shape[axis]
    bshape = [1] * x.ndim
    bshape[axis] = c
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def vjp(g):
        gbeta = g.sum(axis=red)
        ggamma = (g * xhat).sum(axis=red)
        gxhat = g * gamma.reshape(bshape)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, ggamma, gbeta

    return out, vjp


def pixel_shuffle(x, s: int):
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise InputError(f"{cs} channels not divisible by scale^2 = {s * s}")
    c = cs // (s * s)
    out = x.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)

    def vjp(g):
        return (pixel_unshuffle(g, s)[0],)

    return out, vjp


def pixel_unshuffle(x, s: int):
    n, c, hs, ws = x.shape
    if s < 1 or hs % s or ws % s:
        raise InputError(f"spatial size {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    out = x.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)

    def vjp(g):
        return (pixel_shuffle(g, s)[0],)

    return out, vjp


# ----------------------------------------------------------------------------
# parameters and modules


class Parameter:
    """A trainable array with its gradient accumulator."""

    __slots__ = ("value", "grad", "touched")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.touched = False

    def accumulate(self, g) -> None:
        if g is None:
            return
        if g.shape != self.value.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {self.value.shape}")
        self.grad += g
        self.touched = True

    def zero_grad(self) -> None:
        self.grad[...] = 0
        self.touched = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


class Module:
    """Container of named parameters and sub-modules.

    Sub-classes implement ``forward`` (caching what ``backward`` needs) and
    ``backward`` (accumulating parameter gradients, returning input gradients).
    A module instance supports one pending forward at a time.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._children.values():
            yield from m.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._children.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.named_parameters()}

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def macs(self, h: int, w: int) -> int:
        return sum(m.macs(h, w) for m in self._children.values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Same-padded stride-1 convolution layer."""

    def __init__(self, c_in, c_out, kernel=3, dilation=1, rng=None, zero_init=False, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.dilation = c_in, c_out, kernel, dilation
        self.pad = dilation * (kernel - 1) // 2
        fan_in = c_in * kernel * kernel
        if zero_init or rng is None:
            w = np.zeros((c_out, c_in, kernel, kernel), dtype=dtype)
            b = np.zeros(c_out, dtype=dtype)
        else:
            w = uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in, dtype)
            b = uniform_init(rng, (c_out,), fan_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(b)

    def forward(self, x):
        out, self._vjp = conv2d(x, self.weight.value, self.bias.value, 1, self.pad, self.dilation)
        return out

    def backward(self, g):
        gx, gw, gb = self._vjp(g)
        self._vjp = None
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        return gx

    def macs(self, h, w):
        return self.c_in * self.c_out * self.kernel**2 * h * w


# ----------------------------------------------------------------------------
# finite-difference verification


def finite_diff_check(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    eps: float | None = None,
    seed: int = 0,
    max_coords: int | None = None,
    wrt: Sequence[int] | None = None,
    report: dict | None = None,
    order: int = 2,
    probe_dtype=None,
) -> float:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn(*inputs)`` must return ``(output, vjp)``. The scalar probed is
    ``sum(output * t)`` for a fixed random cotangent ``t``. Returns the maximum
    over checked coordinates of ``|a - n| / max(1e-8, |a| + |n|)``.
    ``max_coords`` caps the number of randomly chosen coordinates checked per
    input; ``report`` (if given) receives the worst input index and coordinate.
    ``order=4`` switches to the five-point central stencil, whose truncation
    error allows a larger ``eps`` and hence a lower roundoff floor.

    ``probe_dtype`` (e.g. ``np.longdouble``) evaluates the perturbed forwards
    in higher precision, lowering the roundoff floor of the numeric side; the
    analytic gradients still come from ``fn`` at the inputs' own precision.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    inputs = [np.asarray(x) for x in inputs]
    if eps is None:
        eps = 1e-6 if all(x.dtype == np.float64 for x in inputs) else 1e-3
    snapshot = [x.copy() for x in inputs]
    out, vjp = fn(*inputs)
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(np.shape(out)).astype(np.asarray(out).dtype)
    grads = vjp(cot)
    for i, (x, s) in enumerate(zip(inputs, snapshot)):
        if not np.array_equal(x, s):
            raise ContractError(f"operation mutated input {i}")

    pdt = None if probe_dtype is None else np.dtype(probe_dtype)
    base = [x if pdt is None or x.dtype.kind != "f" else x.astype(pdt) for x in inputs]

    def probe(xs):
        o, _ = fn(*xs)
        return np.asarray(o)

    worst = 0.0
    targets = range(len(inputs)) if wrt is None else wrt
    for i in targets:
        g = grads[i]
        if g is None:
            continue
        x = inputs[i]
        n = x.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)

        def shifted(idx, step):
            xs = base[i].copy()
            xs[idx] += step
            args = list(base)
            args[i] = xs
            return probe(args)

        def estimate(idx, h):
            # difference outputs before reducing: unaffected entries cancel exactly
            d1 = shifted(idx, h) - shifted(idx, -h)
            if order == 2:
                return float(np.sum(d1 * cot)) / (2 * h)
            d2 = shifted(idx, 2 * h) - shifted(idx, -2 * h)
            return float(np.sum((8 * d1 - d2) * cot)) / (12 * h)

        for flat in coords:
            idx = np.unravel_index(flat, x.shape)
            ana = float(g[idx])
            num = estimate(idx, eps)
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            if err > worst:
                worst = err
                if report is not None:
                    report.update(input=i, index=tuple(int(v) for v in idx), analytic=ana, numeric=num)
    return worst


def module_as_op(module: Module, forward: Callable, params: Sequence[Parameter] | None = None):
    """Wrap a module as ``fn(x..., *param_values) -> (out, vjp)`` for ``finite_diff_check``.

    ``forward(*xs)`` runs the module; gradients for the explicit inputs come
    from ``module.backward`` and parameter gradients from ``Parameter.grad``.
    """
    params = module.parameters() if params is None else list(params)
    n_params = len(params)

    def fn(*args):
        xs, values = args[: len(args) - n_params], args[len(args) - n_params :]
        saved = [p.value for p in params]
        for p, v in zip(params, values):
            p.value = v
        try:
            module.zero_grad()
            out = forward(*xs)
        finally:
            for p, v in zip(params, saved):
                p.value = v
        def vjp(g):
            for p, v in zip(params, values):
                p.value = v
            try:
                gin = module.backward(g)
            finally:
                for p, v in zip(params, saved):
                    p.value = v
            gin = gin if isinstance(gin, tuple) else (gin,)
            return list(gin) + [p.grad.copy() for p in params]

        return out, vjp

    return fn, [p.value for p in params]
