import csv
import math

import numpy as np
import pytest

from mddn.checkpoint import read_checkpoint
from mddn.data import ErpDataset, degrade, synth_erp, write_synthetic_dataset
from mddn.errors import ContractError, InputError, TrainingDiverged
from mddn.model import MDDN, preset
from mddn.numerics import Parameter
from mddn.training import (PAPER_MILESTONES, Adam, TrainConfig, l1_loss, lr_schedule, scaled_milestones,
                           split_indices, train_loop)

SMALL = preset("tiny", channels=8, heads=2, n_blocks=1, n_layers=1, offset_channels=4, scale=2)


# -- loss ----------------------------------------------------------------------------


def test_l1_examples():
    a = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert l1_loss(a, a)[0] == 0.0
    assert l1_loss(a + 2, a)[0] == pytest.approx(2.0)
    b = np.random.default_rng(1).standard_normal((2, 3, 4))
    assert l1_loss(a, b)[0] == l1_loss(b, a)[0]
    with pytest.raises(InputError):
        l1_loss(a, b[:1])


def test_l1_gradient_sign_with_zero():
    loss, vjp = l1_loss(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 2.0, 5.0, 4.0]))
    np.testing.assert_array_equal(vjp(1.0), [0.25, 0.0, -0.25, 0.0])


# -- Adam -------------------------------------------------------------------------------


def test_adam_first_step():
    p = Parameter(np.array([0.5]))
    p.accumulate(np.array([1.0]))
    Adam([("w", p)]).step(1e-3)
    assert p.value[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert not p.grad.any() and not p.touched


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([0.5, -0.25]))
    opt = Adam([("w", p)])
    for _ in range(3):
        p.accumulate(np.zeros(2))
        opt.step(1e-2)
    np.testing.assert_array_equal(p.value, [0.5, -0.25])


def test_adam_missing_gradient_is_contract_violation():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(3))
    a.accumulate(np.ones(2))
    with pytest.raises(ContractError, match="'b'"):
        Adam([("a", a), ("b", b)]).step(1e-3)


def test_adam_matches_closed_form_over_steps():
    rng = np.random.default_rng(2)
    grads = rng.standard_normal((5, 3))
    p = Parameter(np.zeros(3))
    opt = Adam([("w", p)])
    m = v = np.zeros(3)
    x = np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.accumulate(g)
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    np.testing.assert_allclose(p.value, x, atol=1e-15)


# -- schedule ------------------------------------------------------------------------------


def test_paper_schedule_values():
    assert lr_schedule(0) == 2e-4
    assert lr_schedule(260_000) == 1e-4
    assert lr_schedule(480_000) == pytest.approx(1.25e-5, abs=1e-20)
    assert lr_schedule(249_999) == 2e-4 and lr_schedule(250_000) == 1e-4
    with pytest.raises(InputError):
        lr_schedule(-1)


@pytest.mark.parametrize("total", [500_000, 5000, 2000])
def test_schedule_is_piecewise_constant_non_increasing(total):
    steps = sorted(set(range(0, total, max(1, total // 997))) | set(scaled_milestones(total)))
    vals = [lr_schedule(s, total=total) for s in steps]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert len(set(vals)) == len(PAPER_MILESTONES) + 1


def test_scaled_milestones():
    assert scaled_milestones(5000) == (2500, 4000, 4500, 4750)
    assert TrainConfig(steps=2000).schedule(1000) == 1e-4


# -- loop -------------------------------------------------------------------------------------


def test_memorisation_on_one_patch():
    model = MDDN(preset("tiny", scale=2), seed=0)
    hr = synth_erp(32, 0)[:, 8:24, 8:24]
    x = degrade(hr, 2)[None].astype(np.float32)
    opt = Adam(model.named_parameters())
    loss = math.inf
    for step in range(2000):
        out = model.forward(x, row_offset=4, full_height=16)
        loss, vjp = l1_loss(out, hr[None])
        model.backward(vjp(1.0))
        norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in model.parameters()))
        assert math.isfinite(norm)
        opt.step(1e-3)
        if loss < 0.01:
            break
    assert loss < 0.01


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = write_synthetic_dataset(tmp_path_factory.mktemp("ds"), 3, 16, seed=2)
    return ErpDataset(root, 2)


def run(dataset, out, steps=12, **kw):
    tcfg = TrainConfig(steps=steps, batch=2, patch=8, base_lr=1e-3, val_every=6, log_every=3, val_images=1,
                       val_per_image=2)
    model = MDDN(SMALL, seed=0)
    state = train_loop(model, dataset, tcfg, out, **kw)
    return model, state


def test_train_outputs_and_log(dataset, tmp_path):
    _, state = run(dataset, tmp_path)
    assert state.step == 12 and state.last_val is not None
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "lr", "val_psnr", "val_ws_psnr"]
    assert [int(r[0]) for r in rows[1:]] == [3, 6, 9, 12]
    assert rows[2][3] and not rows[1][3]
    ck = read_checkpoint(tmp_path / "latest.ckpt")
    assert ck.meta["step"] == "12" and (tmp_path / "best.ckpt").is_file()


def test_training_is_deterministic(dataset, tmp_path):
    run(dataset, tmp_path / "a")
    run(dataset, tmp_path / "b")
    assert (tmp_path / "a" / "latest.ckpt").read_bytes() == (tmp_path / "b" / "latest.ckpt").read_bytes()


def test_resume_is_bit_exact(dataset, tmp_path):
    full, _ = run(dataset, tmp_path / "full")
    run(dataset, tmp_path / "part", stop_at=6)
    resumed, state = run(dataset, tmp_path / "part", resume=tmp_path / "part" / "latest.ckpt")
    assert state.step == 12
    for (k, p), (_, q) in zip(full.named_parameters(), resumed.named_parameters()):
        assert p.value.tobytes() == q.value.tobytes(), k
    with open(tmp_path / "full" / "train_log.csv") as a, open(tmp_path / "part" / "train_log.csv") as b:
        assert a.read() == b.read()


def test_nan_loss_aborts_with_dump(dataset, tmp_path):
    tcfg = TrainConfig(steps=3, batch=2, patch=8, val_images=1, val_per_image=1)
    model = MDDN(SMALL, seed=0)
    model.tail.bias.value[:] = np.nan
    with pytest.raises(TrainingDiverged, match="batch seed"):
        train_loop(model, dataset, tcfg, tmp_path)
    assert "batch_seed" in (tmp_path / "diverged_step0.txt").read_text()


def test_split_indices():
    assert split_indices(5, 2) == ([0, 1, 2], [3, 4])
    with pytest.raises(InputError):
        split_indices(2, 2)
