"""Desk-scale training session: regime ladder and/or baselines, results as JSON.

    python3 scripts/run_desk.py --out runs/desk [--only ladder|baselines] [--seed 0] [--trunk-epochs 15]

The ladder trains the multi-resolution trunk first and the baselines reuse it
as phi_mr, so running both costs one trunk fewer than running them apart.
"""
import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from btnet.checkpoint import Checkpoint
from btnet.experiments import DeskSetup, run_baselines, run_ladder


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--only", choices=["ladder", "baselines"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trunk-epochs", type=int, default=0)
    ap.add_argument("--low-res", type=int, default=8)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = DeskSetup(seed=args.seed, low_res=args.low_res)
    if args.trunk_epochs:
        setup.trunk = replace(setup.trunk, epochs=args.trunk_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if args.only != "baselines":
        ladder = run_ladder(setup, out)
        print("regime       S&r     r&r    ROC-AUC")
        for k, v in ladder["accuracy"].items():
            print(f"{k:<12} {v:6.2f}  {ladder['same_res'][k]:6.2f}  {ladder['roc_auc'][k]:.4f}")
    if args.only != "ladder":
        trunk = out / "trunk.btnt"
        base = run_baselines(setup, out, Checkpoint.load(trunk) if trunk.exists() else None)
        print(json.dumps(base["accuracy"], indent=2))
        print("train accuracy", json.dumps(base["train_accuracy"]))
    print(f"total {(time.time() - t0) / 60:.1f} min; outputs in {out}")


if __name__ == "__main__":
    main()
