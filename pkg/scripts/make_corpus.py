"""Regenerate the bundled texture corpus used by the error-curve checks.

    python3 scripts/make_corpus.py [--out tests/data/corpus] [--n 24] [--seed 0]
"""
import argparse
from pathlib import Path

from btnet import netpbm
from btnet.resample import texture_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests" / "data" / "corpus"))
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--size", type=int, default=112)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(texture_corpus(args.n, args.size, args.seed)):
        netpbm.write(out / f"tex{i:02d}.pgm", img)
    print(f"wrote {args.n} textures to {out}")


if __name__ == "__main__":
    main()
