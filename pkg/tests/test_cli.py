"""End-to-end runs of the command-line tool on a tiny synthetic set."""
from pathlib import Path

import numpy as np
import pytest

from btnet.checkpoint import Checkpoint
from btnet.cli import main

CORPUS = Path(__file__).parent / "data" / "corpus"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data"), "--ids", "8", "--per-id", "6", "--train-ids", "4"]) == 0
    common = ["--set", f"data={root / 'data'}", "--set", "epochs=1", "--set", "batch_size=12"]
    assert main(["train-trunk", *common, "--set", f"out_dir={root / 'trunk'}",
                 "--set", "resolution_scheme=equal_set"]) == 0
    assert main(["train-branch", *common, "--set", f"out_dir={root / 'branch'}",
                 "--set", f"trunk={root / 'trunk' / 'trunk.btnt'}", "--set", "regime=full"]) == 0
    return root, common


def test_training_outputs(workdir):
    root, _ = workdir
    for d in ("trunk", "branch"):
        assert (root / d / "config.resolved.txt").exists()
    assert (root / "trunk" / "log.csv").read_text().startswith("step,lr,loss_influence,loss_distill,loss_total")
    delta = Checkpoint.load(root / "branch" / "branch8.btnt")
    assert delta.meta["kind"] == "branch" and delta.meta["resolution"] == 8


@pytest.mark.parametrize("model_type", ["btnet", "baseline"])
def test_eval_verify(workdir, model_type, capsys):
    root, common = workdir
    out = root / f"verify_{model_type}"
    args = ["eval", "verify", *common, "--set", f"trunk={root / 'trunk' / 'trunk.btnt'}",
            "--set", f"checkpoint={root / 'branch' / 'branch8.btnt'}", "--set", f"out_dir={out}",
            "--set", f"model_type={model_type}", "--set", "n_pairs=200"]
    assert main(args) == 0
    text = (out / "verify.csv").read_text()
    assert text.startswith("label,metric,value") and ",accuracy," in text
    # the written pairs file is accepted back as input
    assert main(args + ["--set", f"pairs={out / 'pairs.tsv'}"]) == 0
    assert (out / "verify.csv").read_text() == text


def test_eval_identify(workdir):
    root, common = workdir
    out = root / "identify"
    assert main(["eval", "identify", *common, "--set", f"trunk={root / 'trunk' / 'trunk.btnt'}",
                 "--set", f"out_dir={out}", "--set", "fpir=0.5", "--set", "rank=2"]) == 0
    assert "tpir@fpir=0.5" in (out / "identify.csv").read_text()


def test_select_and_report(capsys):
    assert main(["select-branch", "--w", "24", "--h", "20", "--indicator", "avg", "--alloc", "ceil",
                 "--branches", "7,14,28,112"]) == 0
    assert capsys.readouterr().out.strip() == "28"
    assert main(["report", "flops"]) == 0
    lines = capsys.readouterr().out.split()
    assert lines[0] == "resolution,flops" and len(lines) == 5
    assert main(["report", "params", "--spec", "paper"]) == 0
    assert capsys.readouterr().out.count("\n") == 6


def test_dump_features(workdir, tmp_path):
    root, _ = workdir
    img = next((root / "data").rglob("*.ppm"))
    assert main(["dump-features", "--checkpoint", str(root / "trunk" / "trunk.btnt"), "--image", str(img),
                 "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["tap16.pgm", "tap32.pgm", "tap4.pgm", "tap8.pgm"]


def test_analyze_error_and_gains(tmp_path, capsys):
    assert main(["analyze-error", "--corpus", str(CORPUS), "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "resolution,mean_bound,n_images"
    capsys.readouterr()
    assert main(["reproduce", "table1-gains", "--out", str(tmp_path)]) == 0
    assert "MISMATCH" not in capsys.readouterr().out


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train-trunk", "--set", "nonsense=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["train-branch", "--set", f"data={tmp_path}"]) == 1
    assert "missing trunk" in capsys.readouterr().err
    assert main(["analyze-error", "--corpus", str(tmp_path), "--out", str(tmp_path / "x.csv")]) == 1
