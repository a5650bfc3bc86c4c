"""Fast reproductions that need no training: gain table, error curve, accounting, selection grid.

    python3 scripts/quick_checks.py [--corpus tests/data/corpus]
"""
import argparse
from pathlib import Path

from btnet import netpbm
from btnet.experiments import fig1_curve, gain_tolerance, table1_gains
from btnet.model import ModelSpec, assemble, build_trunk, count_flops, count_params
from btnet.resample import to_gray
from btnet.select import ALLOCATIONS, INDICATORS, strategy_table

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", default=str(ROOT / "tests" / "data" / "corpus"))
    args = ap.parse_args()

    cells = table1_gains()
    ok = sum(c.error <= gain_tolerance(c) for c in cells)
    print(f"gain cells reproduced: {ok}/{len(cells)}")

    imgs = [to_gray(netpbm.read(p)) for p in sorted(Path(args.corpus).glob("*.p[gp]m"))]
    curve = fig1_curve(imgs)
    print("error bound by resolution:", ", ".join(f"{r}: {b:.5f}" for r, b in zip(curve.resolutions,
                                                                                 curve.mean_bound)))

    for name, spec in (("desk", ModelSpec.desk()), ("paper", ModelSpec.paper())):
        model = assemble(build_trunk(spec, 0))
        bpb, full = count_params(model, "branch_plus_bn"), count_params(model, "full_finetune")
        print(f"\n{name} model   r   branch+BN   full fine-tune   ratio      FLOPs")
        for r in spec.branch_resolutions:
            print(f"{'':>12}{r:>4} {bpb[r]:>11,} {full[r]:>16,} {bpb[r] / full[r]:>7.1%} {count_flops(model, r):>12,}")

    sizes = [(6, 5), (24, 20), (40, 40), (150, 130)]
    table = strategy_table(sizes, [7, 14, 28, 112])
    print("\nbranch per probe size", sizes)
    for ind in INDICATORS:
        print(f"  {ind:<4}", "  ".join(f"{a}:{table[(ind, a)]}" for a in ALLOCATIONS))


if __name__ == "__main__":
    main()
