"""The ten acceptance criteria, each at its stated tolerance.

Criteria 4, 5 and 10 share one desk-scale training session (module fixture):
one multi-resolution trunk, the five-regime branch ladder on top of it, and
the phi_hr / phi_mm baselines. Expect roughly 25 minutes on one CPU core.
"""
import time

import numpy as np
import pytest

from acceptance_log import criterion
from grad_cases import CASES
from gradcheck import TOL

from btnet.checkpoint import Checkpoint, model_to_checkpoint
from btnet.data import synth_arrays
from btnet.experiments import DeskSetup, fig1_curve, gain_tolerance, run_baselines, run_ladder, table1_gains
from btnet.metrics import cross_res_gain, same_res_gain
from btnet.model import ModelSpec, assemble, build_trunk, count_flops, count_params, layer_flops
from btnet.resample import error_upper_bound, mixed_fourth_difference
from btnet.select import strategy_table
from btnet.train import TrainConfig, train_branch, train_trunk, REGIMES

from test_model import TINY, counted_forward, enumerate_counts
from test_resample import grid, load_corpus
from test_select import PAPER_SET, PROBES, TRUTH


def test_criterion_01_gradient_integrity():
    with criterion(1, "gradient integrity") as note:
        t0 = time.time()
        worst = {name: max(case(seed) for seed in range(10)) for name, case in CASES.items()}
        elapsed = time.time() - t0
        name = max(worst, key=worst.get)
        note.append(f"{len(worst)} ops x 10 instances, worst {name} {worst[name]:.1e}")
        assert all(v <= TOL for v in worst.values()), worst
        assert elapsed < 60


def test_criterion_02_gain_reproduction():
    with criterion(2, "gain-formula reproduction") as note:
        t0 = time.time()
        cells = table1_gains()
        bad = [c for c in cells if c.error > gain_tolerance(c)]
        note.append(f"{len(cells) - len(bad)}/{len(cells)} cells within tolerance")
        assert not bad, bad
        assert round(cross_res_gain(86.10, 57.75, 65.85), 2) == 3.50
        assert round(same_res_gain(77.78, 60.70, 62.57), 2) == 9.13
        assert time.time() - t0 < 1


def test_criterion_03_interpolation_error_curve():
    with criterion(3, "interpolation-error curve") as note:
        t0 = time.time()
        imgs = load_corpus()
        curve = fig1_curve(imgs)
        b = curve.mean_bound
        note.append(f"{len(imgs)} images, bounds " + " > ".join(f"{x:.5f}" for x in b))
        assert len(imgs) >= 20
        assert curve.resolutions == [7, 14, 28, 56]
        assert all(x > y for x, y in zip(b, b[1:]))
        f = grid(lambda x, y: x ** 2 * y ** 2)
        assert np.all(mixed_fourth_difference(f) == 4.0)
        assert error_upper_bound(f) == 4 / 64
        assert time.time() - t0 < 10


# ---------------------------------------------------------------------------
# desk-scale training session


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    setup = DeskSetup()
    t0 = time.time()
    ladder = run_ladder(setup, out)
    ladder_minutes = (time.time() - t0) / 60
    baselines = run_baselines(setup, out, mr_ckpt=Checkpoint.load(out / "trunk.btnt"))
    return setup, ladder, ladder_minutes, baselines


def test_criterion_04_regime_ladder(desk):
    setup, ladder, minutes, _ = desk
    with criterion(4, "regime ladder at desk scale") as note:
        a = ladder["accuracy"]
        note.append(", ".join(f"{k} {v:.2f}" for k, v in a.items()) + f"; {minutes:.1f} min")
        gain = a["full"] - a["fix_trunk"]
        note.append(f"distillation {gain:+.2f} points")
        assert a["scratch"] < a["pretraining"] < a["bct"] <= a["fix_trunk"] < a["full"]
        assert gain >= 2.0
        assert minutes < 30


def test_criterion_05_compatibility(desk):
    _, ladder, _, _ = desk
    with criterion(5, "backward compatibility with frozen classifier") as note:
        frozen = [k for k, r in REGIMES.items() if r.freeze_classifier]
        note.append(", ".join(f"{k} AUC {ladder['roc_auc'][k]:.3f}" for k in frozen))
        for k in frozen:
            assert ladder["roc_auc"][k] >= 0.8
            assert ladder["head_unchanged"][k]


def test_criterion_06_storage_accounting():
    with criterion(6, "storage accounting") as note:
        t0 = time.time()
        model = assemble(build_trunk(ModelSpec.desk(), 0))
        bpb = count_params(model, "branch_plus_bn")
        full = count_params(model, "full_finetune")
        note.append(", ".join(f"r={r} {bpb[r] / full[r]:.1%}" for r in sorted(bpb)))
        for r in sorted(bpb):
            assert bpb[r] <= 0.5 * full[r]
            assert (bpb[r], full[r]) == enumerate_counts(model, r)
        assert time.time() - t0 < 1


def test_criterion_07_flop_accounting():
    with criterion(7, "FLOP accounting") as note:
        t0 = time.time()
        tiny = assemble(build_trunk(TINY, 0))
        rng = np.random.default_rng(0)
        for r in TINY.branch_resolutions:
            _, counted = counted_forward(tiny, rng.random((3, r, r)), r)
            assert layer_flops(tiny, r) == counted
        desk = assemble(build_trunk(ModelSpec.desk(), 0))
        f = [count_flops(desk, r) for r in (4, 8, 16, 32)]
        note.append("desk totals " + " < ".join(str(x) for x in f))
        assert all(x < y for x, y in zip(f, f[1:]))
        assert time.time() - t0 < 10


def test_criterion_08_selection_truth_table():
    with criterion(8, "branch-selection truth table"):
        t0 = time.time()
        table = strategy_table(PROBES, PAPER_SET)
        assert table == TRUTH
        assert table[("avg", "ceil")][1] == 28
        assert all(row[3] == 112 for row in table.values())
        assert time.time() - t0 < 1


def test_criterion_09_determinism(tmp_path):
    with criterion(9, "determinism and serialization") as note:
        data = synth_arrays(4, 8, 8, seed=1)
        cfg = TrainConfig(epochs=1, batch_size=8, canonical_size=8, resolution_levels=2,
                          resolution_scheme="equal_set", warmup_epochs=0)
        a = train_trunk(cfg, data, TINY).checkpoint
        b = train_trunk(cfg, data, TINY).checkpoint
        assert a.to_bytes() == b.to_bytes()
        da = train_branch(a, 4, REGIMES["full"], TrainConfig(epochs=1, batch_size=8, canonical_size=8), data)
        db = train_branch(b, 4, REGIMES["full"], TrainConfig(epochs=1, batch_size=8, canonical_size=8), data)
        assert da.checkpoint.to_bytes() == db.checkpoint.to_bytes()
        a.save(tmp_path / "a.btnt")
        reread = Checkpoint.load(tmp_path / "a.btnt")
        reread.save(tmp_path / "b.btnt")
        assert (tmp_path / "a.btnt").read_bytes() == (tmp_path / "b.btnt").read_bytes()
        note.append(f"trunk and branch bit-identical, {len(a.to_bytes())} byte round trip")


def test_criterion_10_baseline_phenomenology(desk):
    setup, _, _, base = desk
    S, r = setup.canonical_size, setup.low_res
    with criterion(10, "baseline phenomenology") as note:
        acc = base["accuracy"]
        cross, mr_low, hr_low = acc["mm"][f"{S}&{r}"], acc["mr"][f"{r}&{r}"], acc["hr"][f"{r}&{r}"]
        note.append(f"phi_mm {S}&{r} {cross:.2f}, {r}&{r} phi_mr {mr_low:.2f} vs phi_hr {hr_low:.2f}, "
                    f"phi_hr train acc {base['train_accuracy']['hr']:.3f}")
        assert abs(cross - 50) <= 5
        assert mr_low > hr_low
