"""Building blocks of the multi-level distortion-aware deformable network.

Every deformable component takes the distortion map ``(N, 1, H, W)`` of its
feature resolution as the input of its own offset network; the feature path
never feeds the offsets. Output projections, final offset layers and the
fusion gate start at zero, so a freshly built layer is an exact residual
identity.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .numerics import (
    Conv2d,
    Module,
    Parameter,
    conv2d,
    gelu,
    layer_norm,
    leaky_relu,
    masked_softmax,
    pad2d,
    project_columns,
    softmax,
    uniform_init,
)
from .sampling import OffsetField, deform_gather, warp

MAX_LEVEL = 5


def low_rank_compose(a: np.ndarray, b: np.ndarray, c_out: int, kernel: int):
    """Rebuild a conv weight ``(C_o, C_i, N, N)`` from factors ``a (C_i, r)``, ``b (C_o*N*N, r)``.

    ``a @ b.T`` is the ``(C_i, C_o*N*N)`` matrix form of the weight.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InputError(f"factor shapes {a.shape} and {b.shape} are inconsistent")
    if b.shape[0] != c_out * kernel * kernel:
        raise InputError(f"b has {b.shape[0]} rows, expected C_o*N*N = {c_out * kernel * kernel}")
    c_in = a.shape[0]
    w = (a @ b.T).reshape(c_in, c_out, kernel, kernel).transpose(1, 0, 2, 3)

    def vjp(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_in, c_out * kernel * kernel)
        return gmat @ b, gmat.T @ a

    return np.ascontiguousarray(w), vjp


class LowRankWeight(Module):
    """Factor pair (A, B) plus bias standing in for a ``C_o x C_i x N x N`` weight."""

    def __init__(self, c_in, c_out, kernel, rank, rng=None, zero_b=False, dtype=np.float64):
        super().__init__()
        if rank < 1:
            raise ConfigError("rank must be >= 1")
        self.c_in, self.c_out, self.kernel, self.rank = c_in, c_out, kernel, rank
        k2 = kernel * kernel
        if rng is None:
            a = np.zeros((c_in, rank), dtype=dtype)
        else:
            a = uniform_init(rng, (c_in, rank), c_in, dtype)
        if zero_b or rng is None:
            b = np.zeros((c_out * k2, rank), dtype=dtype)
        else:
            # composed weight gets the variance of a dense U(+-1/sqrt(fan_in)) init
            b = rng.uniform(-1, 1, size=(c_out * k2, rank)) * np.sqrt(3.0 / (rank * k2))
            b = b.astype(dtype)
        self.a = Parameter(a)
        self.b = Parameter(b)
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def compose(self):
        return low_rank_compose(self.a.value, self.b.value, self.c_out, self.kernel)

    def accumulate(self, gw, gbias):
        ga, gb = self._compose_vjp(gw)
        self.a.accumulate(ga)
        self.b.accumulate(gb)
        self.bias.accumulate(gbias)

    def forward(self):
        w, self._compose_vjp = self.compose()
        return w


class LowRankConv2d(Module):
    """Same-padded convolution whose weight is a ``LowRankWeight``."""

    def __init__(self, c_in, c_out, kernel, rank, rng=None, zero_b=False, dtype=np.float64):
        super().__init__()
        self.weight = LowRankWeight(c_in, c_out, kernel, rank, rng, zero_b, dtype)
        self.pad = (kernel - 1) // 2

    def forward(self, x):
        w = self.weight.forward()
        out, self._vjp = conv2d(x, w, self.weight.bias.value, 1, self.pad, 1)
        return out

    def backward(self, g):
        gx, gw, gb = self._vjp(g)
        self.weight.accumulate(gw, gb)
        return gx

    def macs(self, h, w):
        lw = self.weight
        return lw.c_in * lw.c_out * lw.kernel**2 * h * w


class LeakyReLU(Module):
    def forward(self, x):
        out, self._vjp = leaky_relu(x)
        return out

    def backward(self, g):
        return self._vjp(g)[0]


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class WarpOffsetNet(Sequential):
    """Distortion map -> 2-channel warp field (the DDCA offset network)."""

    def __init__(self, hidden, rank, rng=None, dtype=np.float64):
        super().__init__(
            Conv2d(1, hidden, 3, rng=rng, dtype=dtype),
            LeakyReLU(),
            LowRankConv2d(hidden, hidden, 3, rank, rng, dtype=dtype),
            LeakyReLU(),
            Conv2d(hidden, 2, 3, rng=rng, zero_init=True, dtype=dtype),
        )


class KernelOffsetNet(Sequential):
    """Distortion map -> ``2*N*N`` per-tap offsets; the second layer is low-rank."""

    def __init__(self, hidden, rank, kernel=3, rng=None, dtype=np.float64):
        super().__init__(
            Conv2d(1, hidden, 3, rng=rng, dtype=dtype),
            LeakyReLU(),
            LowRankConv2d(hidden, 2 * kernel * kernel, 3, rank, rng, zero_b=True, dtype=dtype),
        )


class DeformConv(Module):
    """Low-rank deformable 3x3 convolution at a given dilation (D3C when dilation is 1).

    The gathered columns ``(N, C*K, H, W)`` are contracted per pixel with the
    composed weight, which is exactly a same-size convolution when the offsets
    are zero (up to the replicate border of the sampler).
    """

    def __init__(self, channels, dilation, rank, offset_hidden, kernel=3, rng=None, dtype=np.float64):
        super().__init__()
        if dilation < 1:
            raise ConfigError("dilation must be >= 1")
        self.channels, self.dilation, self.kernel = channels, dilation, kernel
        self.offset_net = KernelOffsetNet(offset_hidden, rank, kernel, rng, dtype)
        self.weight = LowRankWeight(channels, channels, kernel, rank, rng, zero_b=True, dtype=dtype)

    def forward(self, f, dmap):
        if dmap.shape[0] != f.shape[0] or dmap.shape[2:] != f.shape[2:]:
            raise InputError(f"distortion map {dmap.shape} does not match features {f.shape}")
        self.last_offsets = self.offset_net.forward(dmap)
        cols, self._gather_vjp = deform_gather(f, OffsetField("kernel", self.last_offsets), self.dilation, self.kernel)
        w = self.weight.forward()
        out, self._proj_vjp = project_columns(cols, w.reshape(self.channels, -1), self.weight.bias.value)
        return out

    def backward(self, g):
        gcols, gw, gb = self._proj_vjp(g)
        self.weight.accumulate(gw.reshape(self.channels, self.channels, self.kernel, self.kernel), gb)
        gf, goff = self._gather_vjp(gcols)
        self.offset_net.backward(goff)
        return gf

    def macs(self, h, w):
        taps = self.kernel**2
        sample = 4 * self.channels * taps * h * w
        project = self.channels * self.channels * taps * h * w
        return self.offset_net.macs(h, w) + sample + project


class D4C(DeformConv):
    """Level-``i`` extractor: deformable convolution with dilation ``i >= 2``."""

    def __init__(self, channels, level, rank, offset_hidden, rng=None, dtype=np.float64):
        if level < 2:
            raise ConfigError(f"D4C level must be >= 2, got {level}; level 1 is the attention branch")
        super().__init__(channels, level, rank, offset_hidden, 3, rng, dtype)


class LayerNorm(Module):
    def __init__(self, channels, dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        out, self._vjp = layer_norm(x, self.gamma.value, self.beta.value)
        return out

    def backward(self, g):
        gx, gg, gb = self._vjp(g)
        self.gamma.accumulate(gg)
        self.beta.accumulate(gb)
        return gx


class Pointwise(Module):
    """1x1 projection ``C_i -> C_o``."""

    def __init__(self, c_in, c_out, rng=None, zero_init=False, dtype=np.float64, bias=True):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        if zero_init or rng is None:
            self.weight = Parameter(np.zeros((c_out, c_in), dtype=dtype))
            b = np.zeros(c_out, dtype=dtype)
        else:
            self.weight = Parameter(uniform_init(rng, (c_out, c_in), c_in, dtype))
            b = uniform_init(rng, (c_out,), c_in, dtype)
        self.bias = Parameter(b) if bias else None

    def forward(self, x):
        b = None if self.bias is None else self.bias.value
        out, self._vjp = project_columns(x, self.weight.value, b)
        return out

    def backward(self, g):
        gx, gw, gb = self._vjp(g)
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx

    def macs(self, h, w):
        return self.c_in * self.c_out * h * w


def relative_position_index(window: int) -> np.ndarray:
    """``(w*w, w*w)`` index into a ``(2w-1)^2`` relative-offset table."""
    ys, xs = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # (2, w*w)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def window_partition(x, window, heads):
    """``(N, C, H, W)`` -> ``(N*nH*nW, heads, w*w, C/heads)``."""
    n, c, h, w = x.shape
    hd = c // heads
    t = x.reshape(n, heads, hd, h // window, window, w // window, window)
    t = t.transpose(0, 3, 5, 1, 4, 6, 2)
    return t.reshape(n * (h // window) * (w // window), heads, window * window, hd)


def window_merge(t, shape, window, heads):
    n, c, h, w = shape
    hd = c // heads
    t = t.reshape(n, h // window, w // window, heads, window, window, hd)
    return t.transpose(0, 3, 6, 1, 4, 2, 5).reshape(n, c, h, w)


class DDCA(Module):
    """Distortion-aware deformable cross-attention (the level-1 extractor).

    Queries come from the input, keys and values from a copy warped by the
    distortion-driven offset field. Attention runs in non-overlapping windows
    with a learned per-head relative position bias.
    """

    def __init__(self, channels, heads, window, rank, offset_hidden, rng=None, dtype=np.float64):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if window < 1:
            raise ConfigError("window must be >= 1")
        self.channels, self.heads, self.window = channels, heads, window
        self.scale = (channels // heads) ** -0.5
        self.offset_net = WarpOffsetNet(offset_hidden, rank, rng, dtype)
        self.q = Pointwise(channels, channels, rng, dtype=dtype)
        # no key bias: it shifts every score of a query row equally, which softmax ignores
        self.k = Pointwise(channels, channels, rng, dtype=dtype, bias=False)
        self.v = Pointwise(channels, channels, rng, dtype=dtype)
        self.o = Pointwise(channels, channels, rng, zero_init=True, dtype=dtype)
        table = np.zeros(((2 * window - 1) ** 2, heads), dtype=dtype)
        if rng is not None:
            table = np.clip(rng.normal(0.0, 0.02, size=table.shape), -0.04, 0.04).astype(dtype)
        self.rel_bias = Parameter(table)
        self._rel_index = relative_position_index(window)

    def _padding(self, h, w):
        return (-h) % self.window, (-w) % self.window

    def forward(self, f, dmap):
        if dmap.shape[0] != f.shape[0] or dmap.shape[2:] != f.shape[2:]:
            raise InputError(f"distortion map {dmap.shape} does not match features {f.shape}")
        n, c, h, w = f.shape
        self.last_offsets = self.offset_net.forward(dmap)
        fw, self._warp_vjp = warp(f, OffsetField("warp", self.last_offsets))
        ph, pw = self._padding(h, w)
        self._pad_vjps = None
        if ph or pw:
            f, vq = pad2d(f, (0, ph, 0, pw), "reflect")
            fw, vk = pad2d(fw, (0, ph, 0, pw), "reflect")
            self._pad_vjps = (vq, vk)
        pshape = f.shape
        win, heads = self.window, self.heads
        q = window_partition(self.q.forward(f), win, heads)
        k = window_partition(self.k.forward(fw), win, heads)
        v = window_partition(self.v.forward(fw), win, heads)
        bias = self.rel_bias.value[self._rel_index].transpose(2, 0, 1)  # (heads, w2, w2)
        scores = np.matmul(q, k.swapaxes(-1, -2)) * self.scale + bias
        attn, self._softmax_vjp = softmax(scores, axis=-1)
        ctx = np.matmul(attn, v)
        y = self.o.forward(window_merge(ctx, pshape, win, heads))
        self._cache = (q, k, v, attn, pshape)
        self.last_attention = attn
        return y[:, :, :h, :w]

    def backward(self, g):
        q, k, v, attn, pshape = self._cache
        win, heads = self.window, self.heads
        h, w = g.shape[2:]
        if pshape[2:] != (h, w):
            gp = np.zeros(pshape, dtype=g.dtype)
            gp[:, :, :h, :w] = g
            g = gp
        gctx = window_partition(self.o.backward(g), win, heads)
        gattn = np.matmul(gctx, v.swapaxes(-1, -2))
        gv = np.matmul(attn.swapaxes(-1, -2), gctx)
        gscores = self._softmax_vjp(gattn)[0]
        gbias = gscores.sum(axis=0)  # (heads, w2, w2)
        gtable = np.zeros_like(self.rel_bias.value)
        for hh in range(heads):
            gtable[:, hh] = np.bincount(self._rel_index.ravel(), weights=gbias[hh].ravel(), minlength=gtable.shape[0])
        self.rel_bias.accumulate(gtable)
        gscores = gscores * self.scale
        gq = np.matmul(gscores, k)
        gk = np.matmul(gscores.swapaxes(-1, -2), q)
        gf = self.q.backward(window_merge(gq, pshape, win, heads))
        gfw = self.k.backward(window_merge(gk, pshape, win, heads))
        gfw = gfw + self.v.backward(window_merge(gv, pshape, win, heads))
        if self._pad_vjps is not None:
            gf = self._pad_vjps[0](gf)[0]
            gfw = self._pad_vjps[1](gfw)[0]
        gf2, goff = self._warp_vjp(gfw)
        self.offset_net.backward(goff)
        return gf + gf2

    def macs(self, h, w):
        ph, pw = self._padding(h, w)
        hp, wp = h + ph, w + pw
        proj = 4 * self.channels**2 * hp * wp
        attention = 2 * self.channels * self.window**2 * hp * wp
        sample = 4 * self.channels * h * w
        return self.offset_net.macs(h, w) + proj + attention + sample


class MFF(Module):
    """Per-pixel softmax gating over branch outputs.

    ``slots`` gate channels are produced by a 3x3 convolution of the layer
    input; slots not listed in ``active`` are masked out, so their gate is
    exactly zero and the remaining gates renormalise.
    """

    def __init__(self, channels, slots, active: Sequence[bool], rng=None, dtype=np.float64):
        super().__init__()
        if len(active) != slots or not any(active):
            raise ConfigError("MFF needs one activity flag per slot and at least one active slot")
        self.slots = slots
        self.active = np.asarray(active, dtype=bool)
        self.gate = Conv2d(channels, slots, 3, rng=rng, zero_init=True, dtype=dtype)

    def forward(self, f, branches):
        if len(branches) != self.slots:
            raise InputError(f"expected {self.slots} branch tensors, got {len(branches)}")
        for i, b in enumerate(branches):
            if self.active[i] and (b is None or b.shape != f.shape):
                raise InputError(f"branch {i} shape mismatch with features {f.shape}")
        logits = self.gate.forward(f)
        gates, self._softmax_vjp = masked_softmax(logits, self.active[None, :, None, None], axis=1)
        self.last_gates = gates
        self._branches = branches
        out = None
        for i in np.flatnonzero(self.active):
            term = gates[:, i : i + 1] * branches[i]
            out = term if out is None else out + term
        return out

    def backward(self, g):
        gates = self.last_gates
        ggates = np.zeros_like(gates)
        gbranches = [None] * self.slots
        for i in np.flatnonzero(self.active):
            ggates[:, i] = (g * self._branches[i]).sum(axis=1)
            gbranches[i] = g * gates[:, i : i + 1]
        glogits = self._softmax_vjp(ggates)[0]
        gf = self.gate.backward(glogits)
        return gf, gbranches

    def macs(self, h, w):
        return self.gate.macs(h, w) + self.gate.c_in * int(self.active.sum()) * h * w


class AddFusion(Module):
    """Plain pixel-wise sum of the active branches (the ``addition`` ablation)."""

    def __init__(self, slots, active):
        super().__init__()
        self.slots = slots
        self.active = np.asarray(active, dtype=bool)

    def forward(self, f, branches):
        out = None
        for i in np.flatnonzero(self.active):
            out = branches[i] if out is None else out + branches[i]
        return out

    def backward(self, g):
        return None, [g if a else None for a in self.active]


def mff(f, f1, f2, f3, gate_weight=None, gate_bias=None, active=(True, True, True)):
    """Functional three-branch fusion: returns ``(fused, gates)``.

    With no gate parameters the gating conv is zero, i.e. uniform gates.
    """
    c = f.shape[1]
    mod = MFF(c, 3, active, dtype=f.dtype)
    if gate_weight is not None:
        mod.gate.weight.value = gate_weight
    if gate_bias is not None:
        mod.gate.bias.value = gate_bias
    branches = [b if b is not None else np.zeros_like(f) for b in (f1, f2, f3)]
    out = mod.forward(f, branches)
    return out, mod.last_gates


class FFN(Module):
    def __init__(self, channels, expansion=2, rng=None, dtype=np.float64):
        super().__init__()
        self.fc1 = Pointwise(channels, expansion * channels, rng, dtype=dtype)
        self.fc2 = Pointwise(expansion * channels, channels, rng, zero_init=True, dtype=dtype)

    def forward(self, x):
        h, self._act_vjp = gelu(self.fc1.forward(x))
        return self.fc2.forward(h)

    def backward(self, g):
        return self.fc1.backward(self._act_vjp(self.fc2.backward(g))[0])


def validate_branches(branches) -> tuple[int, ...]:
    levels = tuple(sorted(set(int(b) for b in branches)))
    if not levels:
        raise ConfigError("branch set must not be empty")
    if levels[0] < 1 or levels[-1] > MAX_LEVEL:
        raise ConfigError(f"branch levels must lie in 1..{MAX_LEVEL}, got {levels}")
    return levels


class MDDL(Module):
    """Pre-norm layer: multi-level extractor + fusion (+ optional FFN), both residual."""

    def __init__(self, channels, branches, heads, window, rank, offset_hidden, ffn=True,
                 fusion="mff", ffn_expansion=2, rng=None, dtype=np.float64):
        super().__init__()
        self.levels = validate_branches(branches)
        self.norm1 = LayerNorm(channels, dtype)
        extractors = []
        for level in self.levels:
            if level == 1:
                extractors.append(DDCA(channels, heads, window, rank, offset_hidden, rng, dtype))
            else:
                extractors.append(D4C(channels, level, rank, offset_hidden, rng, dtype))
        self.extractors = extractors
        slots = max(3, len(self.levels))
        active = [i < len(self.levels) for i in range(slots)]
        if fusion == "mff":
            self.fusion = MFF(channels, slots, active, rng, dtype)
        elif fusion == "addition":
            self.fusion = AddFusion(slots, active)
        else:
            raise ConfigError(f"unknown fusion {fusion!r}")
        self.slots = slots
        self.use_ffn = ffn
        if ffn:
            self.norm2 = LayerNorm(channels, dtype)
            self.ffn = FFN(channels, ffn_expansion, rng, dtype)

    def forward(self, f, dmap):
        u = self.norm1.forward(f)
        outs = [e.forward(u, dmap) for e in self.extractors]
        outs += [None] * (self.slots - len(outs))
        y = f + self.fusion.forward(u, outs)
        if self.use_ffn:
            y = y + self.ffn.forward(self.norm2.forward(y))
        return y

    def backward(self, g):
        gy = g
        if self.use_ffn:
            gy = g + self.norm2.backward(self.ffn.backward(g))
        gu, gouts = self.fusion.backward(gy)
        gu = np.zeros_like(gy) if gu is None else gu
        for e, go in zip(self.extractors, gouts):
            gu = gu + e.backward(go)
        return gy + self.norm1.backward(gu)


class MDDB(Module):
    """Block: stacked MDDLs -> 3x3 conv -> D3C, with a block residual."""

    def __init__(self, channels, n_layers, branches, heads, window, rank, offset_hidden,
                 ffn=True, fusion="mff", ffn_expansion=2, rng=None, dtype=np.float64, residual=True):
        super().__init__()
        if n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        self.layers = [
            MDDL(channels, branches, heads, window, rank, offset_hidden, ffn, fusion, ffn_expansion, rng, dtype)
            for _ in range(n_layers)
        ]
        self.conv = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.d3c = DeformConv(channels, 1, rank, offset_hidden, 3, rng, dtype)
        self.residual = residual

    def forward(self, f, dmap):
        x = f
        for layer in self.layers:
            x = layer.forward(x, dmap)
        x = self.d3c.forward(self.conv.forward(x), dmap)
        return f + x if self.residual else x

    def backward(self, g):
        gx = self.conv.backward(self.d3c.backward(g))
        for layer in reversed(self.layers):
            gx = layer.backward(gx)
        return g + gx if self.residual else gx
