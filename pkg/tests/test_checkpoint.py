import struct

import numpy as np
import pytest

from mddn.checkpoint import (MAGIC, Checkpoint, decode, encode, load_checkpoint, read_checkpoint, save_checkpoint,
                             write_checkpoint)
from mddn.errors import ConfigError, FormatError
from mddn.model import MDDN, preset

CFG = preset("tiny", channels=8, heads=2, n_blocks=1, n_layers=1, offset_channels=4, scale=2)


def perturbed(seed=0, dtype=np.float32):
    m = MDDN(CFG, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    for p in m.parameters():
        p.value = (p.value + rng.uniform(-0.05, 0.05, p.value.shape)).astype(dtype)
    return m


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_bit_exact(tmp_path, dtype):
    m = perturbed(dtype=dtype)
    save_checkpoint(m, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.cfg == m.cfg
    for (k, p), (k2, q) in zip(m.named_parameters(), back.named_parameters()):
        assert k == k2 and p.value.dtype == q.value.dtype and p.value.tobytes() == q.value.tobytes()
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = np.random.default_rng(1).uniform(0, 1, (1, 3, 6, 8))
    assert np.array_equal(m.forward(x), back.forward(x))


def test_layout_header(tmp_path):
    save_checkpoint(perturbed(), tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    assert data[:5] == b"MDDN1"
    assert struct.unpack("<I", data[5:9]) == (1,)
    (n,) = struct.unpack("<I", data[9:13])
    assert b"channels = 8" in data[13 : 13 + n]


def test_optimizer_appendix_round_trip():
    ck = Checkpoint(CFG, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, meta={"step": "7"},
                    optimizer={"adam.m.w": np.ones((2, 3), dtype=np.float32)})
    back = decode(encode(ck))
    assert back.meta == {"step": "7"}
    assert np.array_equal(back.optimizer["adam.m.w"], ck.optimizer["adam.m.w"])
    assert np.array_equal(back.tensors["w"], ck.tensors["w"])


def test_bad_magic_reports_offset_zero():
    data = encode(Checkpoint(CFG, {}))
    with pytest.raises(FormatError) as exc:
        decode(b"XXXXX" + data[5:])
    assert exc.value.offset == 0


def test_version_mismatch():
    data = bytearray(encode(Checkpoint(CFG, {})))
    data[5:9] = struct.pack("<I", 99)
    with pytest.raises(FormatError, match="version"):
        decode(bytes(data))


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_truncation_reports_offset(tmp_path, cut):
    save_checkpoint(perturbed(), tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    n = cut if cut > 0 else len(data) + cut
    with pytest.raises(FormatError) as exc:
        decode(data[:n])
    assert exc.value.offset is not None and 0 <= exc.value.offset <= n


def test_trailing_garbage_rejected():
    with pytest.raises(FormatError):
        decode(encode(Checkpoint(CFG, {})) + b"junk!")


def test_invalid_config_record():
    body = b"colour = red\n"
    data = MAGIC + struct.pack("<I", 1) + struct.pack("<I", len(body)) + body + struct.pack("<I", 0)
    with pytest.raises(FormatError, match="config"):
        decode(data)


def test_mismatched_width_names_tensor(tmp_path):
    save_checkpoint(perturbed(), tmp_path / "a.ckpt")
    with pytest.raises(ConfigError, match="shallow.weight"):
        load_checkpoint(tmp_path / "a.ckpt", cfg=CFG.replace(channels=4))


def test_missing_and_extra_tensors(tmp_path):
    m = perturbed()
    tensors = dict(m.state_dict())
    tensors.pop("tail.bias")
    write_checkpoint(Checkpoint(CFG, tensors), tmp_path / "miss.ckpt")
    with pytest.raises(ConfigError, match="tail.bias"):
        load_checkpoint(tmp_path / "miss.ckpt")
    tensors = dict(m.state_dict(), extra=np.zeros(2, dtype=np.float32))
    write_checkpoint(Checkpoint(CFG, tensors), tmp_path / "extra.ckpt")
    with pytest.raises(ConfigError, match="extra"):
        load_checkpoint(tmp_path / "extra.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nope.ckpt")
