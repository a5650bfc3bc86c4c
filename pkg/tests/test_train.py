import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from btnet.checkpoint import model_from_checkpoint
from btnet.data import synth_arrays
from btnet.model import ModelSpec
from btnet.train import (REGIMES, SGD, Regime, TrainConfig, TrainingDiverged, default_set_weights, degrade, lr_at,
                         sample_resolution, train_branch, train_mm, train_trunk)
from btnet.tensor import Tensor

TINY = ModelSpec(canonical_size=8, stem_channels=4, stages=[(8, 1, 2), (8, 1, 2)], embedding_dim=8)


def tiny_cfg(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 16, "base_lr": 0.05, "warmup_epochs": 0, "canonical_size": 8,
                          "resolution_levels": 3, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    return synth_arrays(4, 12, 8, seed=0, max_freq=3)


@pytest.fixture(scope="module")
def tiny_trunk(tiny_data):
    return train_trunk(tiny_cfg(), tiny_data, TINY).checkpoint


# ---------------------------------------------------------------------------
# resolution sampling and schedule


def draws(cfg, n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    return np.array([sample_resolution(cfg, rng) for _ in range(n)])


def test_equal_set_frequencies():
    cfg = TrainConfig(resolution_scheme="equal_set")
    d = draws(cfg)
    for r in cfg.candidate_set:
        assert abs(np.mean(d == r) - 1 / 4) <= 0.01
    assert set(np.unique(d)) == {32, 16, 8, 4}


def test_weighted_set_top_frequency():
    cfg = TrainConfig(resolution_scheme="weighted_set", canonical_size=112, resolution_levels=5)
    d = draws(cfg)
    assert abs(np.mean(d == 112) - 0.3) <= 0.01
    assert abs(np.mean(d == 7) - 0.1) <= 0.01


def test_uniform_interval_bounds():
    d = draws(TrainConfig(resolution_scheme="uniform_interval"), 20_000)
    assert d.min() == 4 and d.max() == 32


def test_desk_weights_fold_tail():
    assert default_set_weights(5) == (0.3, 0.25, 0.2, 0.15, 0.1)
    np.testing.assert_allclose(default_set_weights(4), (0.3, 0.25, 0.2, 0.25))


def test_bad_config_values():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(resolution_scheme="sometimes")
    with pytest.raises(ValueError):
        TrainConfig(resolution_weights=(0.5, 0.5))
    with pytest.raises(ValueError):
        Regime(from_scratch=True, init_from_trunk=False, freeze_trunk=True)


def test_lr_schedule_points():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, base_lr=0.1)
    spe = 10
    assert lr_at(0, cfg, spe) == 0.0
    assert lr_at(10, cfg, spe) == pytest.approx(0.05)
    assert lr_at(20, cfg, spe) == pytest.approx(0.1)
    assert lr_at(60, cfg, spe) == pytest.approx(0.1 * 0.25)
    assert lr_at(100, cfg, spe) == 0.0


@given(st.integers(0, 99))
@settings(max_examples=50, deadline=None)
def test_lr_monotone_after_warmup(step):
    cfg = TrainConfig(epochs=10, warmup_epochs=2)
    if step >= 20:
        assert lr_at(step + 1, cfg, 10) <= lr_at(step, cfg, 10)
    assert 0 <= lr_at(step, cfg, 10) <= cfg.base_lr


def test_degrade_keeps_full_size_and_range():
    x = np.random.default_rng(0).random((3, 3, 16, 16)).astype(np.float32)
    y = degrade(x, [16, 8, 4])
    assert y.shape == x.shape
    assert np.array_equal(y[0], x[0])
    assert 0 <= y.min() and y.max() <= 1
    assert not np.allclose(y[2], x[2])


def test_sgd_decays_only_listed_tensors():
    w = Tensor(np.ones(2), requires_grad=True)
    g = Tensor(np.ones(2), requires_grad=True)
    for p in (w, g):
        p.grad = np.zeros(2)
    opt = SGD([w, g], momentum=0.9, weight_decay=0.5, decay=[w])
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_allclose(g.data, 1.0)


# ---------------------------------------------------------------------------
# training runs


def test_trunk_training_is_deterministic(tiny_data, tiny_trunk):
    again = train_trunk(tiny_cfg(), tiny_data, TINY).checkpoint
    assert again.to_bytes() == tiny_trunk.to_bytes()


def test_mm_is_deterministic_and_tagged(tiny_data):
    a = train_mm(tiny_cfg(epochs=1), tiny_data, 4, TINY).checkpoint
    b = train_mm(tiny_cfg(epochs=1), tiny_data, 4, TINY).checkpoint
    assert a.to_bytes() == b.to_bytes()
    assert a.meta["kind"] == "mm" and a.meta["resolution"] == 4


def test_log_file_columns(tiny_data, tmp_path):
    path = tmp_path / "log.csv"
    rows = train_trunk(tiny_cfg(epochs=1, log_path=str(path)), tiny_data, TINY).log
    with open(path) as fh:
        read = list(csv.reader(fh))
    assert read[0] == ["step", "lr", "loss_influence", "loss_distill", "loss_total"]
    assert len(read) == len(rows) + 1
    assert all(np.isfinite(float(v)) for line in read[1:] for v in line)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(tiny_data):
    with pytest.raises(TrainingDiverged, match="step"):
        train_trunk(tiny_cfg(base_lr=1e30, epochs=3), tiny_data, TINY)


def test_frozen_trunk_diff_is_branch_and_bank(tiny_data, tiny_trunk):
    run = train_branch(tiny_trunk, 4, REGIMES["fix_trunk"], tiny_cfg(epochs=1), tiny_data)
    keys = set(run.checkpoint.arrays)
    assert all(k.startswith("branch/4/") or k.startswith("bn/r4/") for k in keys)
    assert any(k.startswith("bn/r4/") for k in keys) and any(k.startswith("branch/4/w/") for k in keys)
    merged = tiny_trunk.merged(run.checkpoint)
    changed = {k for k in merged.arrays if k not in tiny_trunk.arrays
               or not np.array_equal(merged.arrays[k], tiny_trunk.arrays[k])}
    assert changed <= keys
    assert model_from_checkpoint(merged).branches[4].r == 4


def test_bct_keeps_classifier_bits(tiny_data, tiny_trunk):
    run = train_branch(tiny_trunk, 4, REGIMES["bct"], tiny_cfg(epochs=1), tiny_data)
    assert "head/w" not in run.checkpoint.arrays
    assert any(k.startswith("w/") for k in run.checkpoint.arrays)


def test_distillation_loss_falls_in_first_epoch():
    data = synth_arrays(4, 48, 8, seed=0, max_freq=3)
    trunk = train_trunk(tiny_cfg(epochs=3), data, TINY).checkpoint
    run = train_branch(trunk, 4, REGIMES["full"], tiny_cfg(epochs=1, batch_size=8), data)
    d = np.array([row["loss_distill"] for row in run.log if row["epoch"] == 0])
    q = len(d) // 4
    # per-step values are noisy at batch 8; compare the opening and closing quarters
    assert d[-q:].mean() < d[:q].mean()
    assert d[-1] < d[0]


def test_branch_rejects_mismatched_inputs(tiny_data, tiny_trunk):
    run = train_branch(tiny_trunk, 4, REGIMES["fix_trunk"], tiny_cfg(epochs=1), tiny_data)
    with pytest.raises(ValueError):
        train_branch(run.checkpoint, 4, REGIMES["full"], tiny_cfg(), tiny_data)
    with pytest.raises(ValueError):
        train_branch(tiny_trunk, 3, REGIMES["full"], tiny_cfg(), tiny_data)
    with pytest.raises(ValueError):
        train_branch(tiny_trunk, 4, REGIMES["full"], tiny_cfg(), synth_arrays(3, 4, 8))
