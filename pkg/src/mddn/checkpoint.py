"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"MDDN1"                      magic
    u32 version
    u32 n, n bytes                config text (``key = value`` lines, UTF-8)
    tensor table                  model parameters
    [b"OPTIM"                     optional optimizer appendix
     u32 n, n bytes               training metadata text
     tensor table]                optimizer moments

    tensor table := u32 count, then per tensor:
        u16 name length, name (UTF-8), u8 dtype code, u8 ndim,
        ndim x u64 dims, raw values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import MDDN, ModelConfig, parse_kv

MAGIC = b"MDDN1"
OPTIM_MAGIC = b"OPTIM"
VERSION = 1

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = VERSION
    meta: dict[str, str] | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


# ----------------------------------------------------------------------------
# encoding


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = next((c for c, d in DTYPE_CODES.items()
                     if d.kind == arr.dtype.kind and d.itemsize == arr.dtype.itemsize), None)
        if code is None:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", ckpt.version), _text(ckpt.config.to_text()), _table(ckpt.tensors)]
    if ckpt.meta is not None:
        meta = "".join(f"{k} = {v}\n" for k, v in ckpt.meta.items())
        out += [OPTIM_MAGIC, _text(meta), _table(ckpt.optimizer)]
    return b"".join(out)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


# ----------------------------------------------------------------------------
# decoding


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", start) from None

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", "tensor count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "tensor name length")
            name = self.take(nlen, "tensor name").decode("utf-8", errors="replace")
            at = self.pos
            code, ndim = self.unpack("<BB", f"header of {name}")
            if code not in DTYPE_CODES:
                raise FormatError(f"tensor {name!r}: unknown dtype code {code}", at)
            dims = self.unpack(f"<{ndim}Q", f"dims of {name}")
            dt = DTYPE_CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            raw = self.take(nbytes, f"values of {name}")
            out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        return out


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {VERSION})", len(MAGIC))
    at = r.pos
    try:
        cfg = ModelConfig.from_text(r.text("config record"))
    except ConfigError as exc:
        raise FormatError(f"invalid config record: {exc}", at) from None
    tensors = r.table()
    meta, optim = None, {}
    if r.pos < len(data):
        at = r.pos
        if r.take(len(OPTIM_MAGIC), "appendix magic") != OPTIM_MAGIC:
            raise FormatError("unexpected trailing bytes", at)
        meta = parse_kv(r.text("training metadata"))
        optim = r.table()
        if r.pos != len(data):
            raise FormatError("unexpected trailing bytes", r.pos)
    return Checkpoint(cfg, tensors, version, meta, optim)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


# ----------------------------------------------------------------------------
# model level


def save_checkpoint(model: MDDN, path, meta: dict | None = None, optimizer: dict | None = None) -> None:
    ckpt = Checkpoint(model.cfg, {k: v for k, v in model.state_dict().items()},
                      meta=None if meta is None else {k: str(v) for k, v in meta.items()},
                      optimizer=dict(optimizer or {}))
    write_checkpoint(ckpt, path)


def load_state(model: MDDN, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``tensors`` into ``model`` in place, checking names and shapes."""
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise ConfigError(f"checkpoint lacks tensor {name!r}")
        t = tensors[name]
        if t.shape != p.value.shape:
            raise ConfigError(f"tensor {name!r}: checkpoint shape {t.shape} != model shape {p.value.shape}")
    extra = sorted(set(tensors) - set(params))
    if extra:
        raise ConfigError(f"checkpoint tensor {extra[0]!r} has no counterpart in the model")
    for name, p in params.items():
        p.value = tensors[name].astype(p.value.dtype, copy=True)
        p.grad = np.zeros_like(p.value)


def load_checkpoint(path, cfg: ModelConfig | None = None) -> MDDN:
    """Rebuild the stored model (or ``cfg``'s model, which must match)."""
    ckpt = read_checkpoint(path)
    dtype = next(iter(ckpt.tensors.values())).dtype if ckpt.tensors else np.float32
    model = MDDN(cfg or ckpt.config, seed=None, dtype=dtype)
    load_state(model, ckpt.tensors)
    return model
