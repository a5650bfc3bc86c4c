"""Command-line entry point (``btnet <command> ...``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import experiments as E
from . import netpbm
from .checkpoint import Checkpoint, model_from_checkpoint, trunk_from_checkpoint
from .config import RunConfig
from .data import DatasetManifest, make_pairs, read_pairs, synth_data, write_pairs
from .metrics import MetricReport, auc_tpir, pair_scores, tar_at_far, tpir_at_fpir, tpir_curve, verification_accuracy
from .model import ModelSpec, assemble, build_trunk, count_flops, count_params, tap_feature
from .resample import error_curve, resize_bilinear, to_gray
from .select import SelectionPolicy
from .tensor import Tensor, no_grad
from .train import train_branch, train_mm, train_trunk

log = logging.getLogger("btnet")


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_text("", overrides)


def _need(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) in (None, "")]
    if missing:
        raise ValueError(f"config is missing {', '.join(missing)}")


def _load_model(cfg: RunConfig):
    """Trunk checkpoint with any comma-separated branch deltas merged on top."""
    _need(cfg, "trunk")
    ckpt = Checkpoint.load(cfg.trunk)
    for delta in (cfg.checkpoint or "").split(","):
        if delta.strip():
            ckpt = ckpt.merged(Checkpoint.load(delta.strip()))
    return ckpt


def _manifest(cfg: RunConfig) -> DatasetManifest:
    _need(cfg, "data")
    path = Path(cfg.data)
    return DatasetManifest.read(path / "manifest.tsv" if path.is_dir() else path)


def _write_csv(path: Path, header: List[str], rows) -> None:
    path.write_text(",".join(header) + "\n" + "".join(",".join(str(v) for v in r) + "\n" for r in rows))


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> None:
    m = synth_data(args.out, args.ids, args.per_id, args.size, args.seed, args.train_ids)
    print(f"wrote {len(m.entries)} images for {args.ids} identities to {args.out}")


def cmd_analyze_error(args) -> None:
    paths = sorted(p for p in Path(args.corpus).iterdir() if p.suffix in (".pgm", ".ppm"))
    if not paths:
        raise ValueError(f"no .pgm/.ppm images in {args.corpus}")
    images = [to_gray(netpbm.read(p)) for p in paths]
    curve = error_curve(images, [int(r) for r in args.resolutions.split(",")], args.canonical)
    curve.to_csv(args.out)
    for r, b in zip(curve.resolutions, curve.mean_bound):
        print(f"{r}\t{b:.6g}")


def _train_common(cfg: RunConfig):
    train = _manifest(cfg).load(cfg.split, cfg.canonical_size)
    out = Path(cfg.out_dir)
    cfg.write_resolved(out)
    return train, out


def cmd_train_trunk(args) -> None:
    cfg = _config(args)
    train, out = _train_common(cfg)
    run = train_trunk(replace(cfg.train_config(), log_path=str(out / "log.csv")), train)
    run.checkpoint.save(out / "trunk.btnt")
    print(f"trunk saved to {out / 'trunk.btnt'} (train accuracy {run.checkpoint.meta['train_accuracy']:.3f})")


def cmd_train_mm(args) -> None:
    cfg = _config(args)
    train, out = _train_common(cfg)
    r = cfg.resolution
    run = train_mm(replace(cfg.train_config(), log_path=str(out / f"log_mm{r}.csv")), train, r)
    run.checkpoint.save(out / f"mm{r}.btnt")
    print(f"per-resolution model saved to {out / f'mm{r}.btnt'}")


def cmd_train_branch(args) -> None:
    cfg = _config(args)
    _need(cfg, "trunk")
    train, out = _train_common(cfg)
    r = cfg.resolution
    run = train_branch(Checkpoint.load(cfg.trunk), r, cfg.regime_flags(),
                       replace(cfg.train_config(), log_path=str(out / f"log_branch{r}.csv")), train)
    run.checkpoint.save(out / f"branch{r}.btnt")
    print(f"branch delta saved to {out / f'branch{r}.btnt'}")


def _embed_side(cfg: RunConfig, ckpt: Checkpoint, images: np.ndarray, r: int) -> np.ndarray:
    """Down-sample canonical images to r, then route by model type."""
    S = images.shape[-1]
    if cfg.model_type == "baseline":
        return E.embed_upsampled(trunk_from_checkpoint(ckpt), images, r)
    if cfg.model_type != "btnet":
        raise ValueError(f"model_type must be btnet or baseline, not {cfg.model_type!r}")
    model = model_from_checkpoint(ckpt)
    b = cfg.policy().select(r, r)
    if b in model.branches:
        x = E.resize_bilinear_batch(images, r, r) if r != S else images
        x = E.resize_bilinear_batch(x, b, b) if b != r else x
        return E._batched(lambda t: model.forward(t, b), x)
    # no branch for this size: the trunk's own path on the up-sampled image
    return E.embed_upsampled(model.trunk, images, r)


def cmd_eval(args) -> None:
    cfg = _config(args)
    manifest = _manifest(cfg)
    ckpt = _load_model(cfg)
    S = ModelSpec.from_dict(ckpt.meta["spec"]).canonical_size
    entries = manifest.select(cfg.eval_split)
    ds = manifest.load(cfg.eval_split, S)
    out = Path(cfg.out_dir)
    cfg.write_resolved(out)
    e1 = _embed_side(cfg, ckpt, ds.images, cfg.r1)
    e2 = e1 if cfg.r2 == cfg.r1 else _embed_side(cfg, ckpt, ds.images, cfg.r2)
    report = MetricReport(label=f"{cfg.model_type} {cfg.r1}&{cfg.r2}")
    if args.task == "verify":
        if cfg.pairs:
            pairs = read_pairs(cfg.pairs, [e.path for e in entries])
        else:
            pairs = make_pairs(ds.labels, cfg.n_pairs, cfg.seed)
            write_pairs(out / "pairs.tsv", pairs, [e.path for e in entries])
        scores = pair_scores(e1, e2, pairs)
        same = pairs[:, 2].astype(bool)
        report.accuracy = verification_accuracy(scores, same)
        for far in cfg.far:
            report.tar_at_far[far] = tar_at_far(scores[same], scores[~same], far)
    else:
        tags = np.array([e.split for e in entries])
        gal = tags == "gallery"
        if not gal.any():
            raise ValueError("identification needs entries tagged gallery")
        gallery_ids = ds.labels[gal]
        probes = ~gal
        mated = probes & np.isin(ds.labels, gallery_ids)
        non_mated = probes & ~mated
        args_ = (e2[mated], ds.labels[mated], e2[non_mated], e1[gal], gallery_ids)
        for fpir in cfg.fpir:
            report.tpir_at_fpir[fpir] = tpir_at_fpir(*args_, rank=cfg.rank, fpir=fpir)
        report.auc = auc_tpir(*tpir_curve(*args_, rank=cfg.rank))
    (out / f"{args.task}.csv").write_text(report.to_csv())
    print(report.to_table())


def cmd_select_branch(args) -> None:
    branches = [int(b) for b in args.branches.split(",")]
    print(SelectionPolicy(args.indicator, args.alloc, branches).select(args.h, args.w))


def _spec_model(args):
    """Accounting depends only on the architecture, so branches are assembled from the spec."""
    if args.checkpoint:
        spec = ModelSpec.from_dict(Checkpoint.load(args.checkpoint).meta["spec"])
    else:
        spec = ModelSpec.paper() if args.spec == "paper" else ModelSpec.desk()
    return assemble(build_trunk(spec, 0))


def cmd_report(args) -> None:
    model = _spec_model(args)
    rs = model.spec.branch_resolutions
    if args.what == "params":
        full = count_params(model, "full_finetune")
        bpb = count_params(model, "branch_plus_bn")
        rows = [(r, bpb[r], full[r], f"{bpb[r] / full[r]:.4f}") for r in rs]
        header = ["resolution", "branch_plus_bn", "full_finetune", "ratio"]
    else:
        rows = [(r, count_flops(model, r)) for r in rs]
        header = ["resolution", "flops"]
    print(",".join(header))
    for row in rows:
        print(",".join(str(v) for v in row))


def _grid(fmap: np.ndarray) -> np.ndarray:
    """C x h x w activations tiled into one image, each channel min-max scaled."""
    c, h, w = fmap.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    out = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for k in range(c):
        ch = fmap[k]
        span = ch.max() - ch.min()
        ch = (ch - ch.min()) / span if span > 0 else np.zeros_like(ch)
        i, j = divmod(k, cols)
        out[i * (h + 1):i * (h + 1) + h, j * (w + 1):j * (w + 1) + w] = ch
    return out


def cmd_dump_features(args) -> None:
    trunk = trunk_from_checkpoint(Checkpoint.load(args.checkpoint))
    S = trunk.spec.canonical_size
    img = netpbm.read(args.image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = resize_bilinear(img, S, S) if img.shape[:2] != (S, S) else img
    x = Tensor(np.moveaxis(img, -1, 0)[None].astype(np.float32))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rs = [args.resolution] if args.resolution else trunk.spec.branch_resolutions
    with no_grad():
        for r in rs:
            fmap = tap_feature(trunk, x, r).data[0]
            netpbm.write(out / f"tap{r}.pgm", _grid(fmap))
            print(f"tap {r}: {fmap.shape[0]} channels -> {out / f'tap{r}.pgm'}")


def cmd_reproduce(args) -> None:
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.what == "table1-gains":
        cells = E.table1_gains()
        rows = [(c.model, c.setting, f"{c.published:.2f}", f"{c.computed:.4f}", f"{c.error:.4f}",
                 "ok" if c.error <= E.gain_tolerance(c) else "MISMATCH") for c in cells]
        header = ["model", "setting", "published", "computed", "abs_diff", "status"]
        print("\t".join(header))
        for r in rows:
            print("\t".join(r))
        if out:
            _write_csv(out / "table1_gains.csv", header, rows)
        return
    if args.what == "fig1-curve":
        images = None
        if args.corpus:
            images = [to_gray(netpbm.read(p)) for p in sorted(Path(args.corpus).iterdir())
                      if p.suffix in (".pgm", ".ppm")]
        curve = E.fig1_curve(images)
        for r, b in zip(curve.resolutions, curve.mean_bound):
            print(f"{r}\t{b:.6g}")
        if out:
            curve.to_csv(out / "fig1_curve.csv")
        return
    setup = E.DeskSetup(seed=args.seed)
    if args.trunk_epochs:
        setup.trunk = replace(setup.trunk, epochs=args.trunk_epochs)
    if args.what == "table3-ladder":
        res = E.run_ladder(setup, out)
        print("regime\tacc_S&r\tacc_r&r\troc_auc")
        for name, acc in res["accuracy"].items():
            print(f"{name}\t{acc:.2f}\t{res['same_res'][name]:.2f}\t{res['roc_auc'][name]:.4f}")
    else:
        res = E.run_baselines(setup, out)
        print(json.dumps(res["accuracy"], indent=2))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="btnet", description="Branch-to-trunk multi-resolution recognition toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    sp = sub.add_parser("synth-data", help="write a synthetic identity dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ids", type=int, default=64)
    sp.add_argument("--per-id", type=int, default=40)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train-ids", type=int, default=None)
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("analyze-error", help="interpolation error bound per resolution")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--resolutions", default="7,14,28,56")
    sp.add_argument("--canonical", type=int, default=112)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_analyze_error)

    with_config(sub.add_parser("train-trunk", help="train a trunk / baseline")).set_defaults(fn=cmd_train_trunk)
    with_config(sub.add_parser("train-mm", help="train one per-resolution model")).set_defaults(fn=cmd_train_mm)
    with_config(sub.add_parser("train-branch", help="train one branch under a regime")).set_defaults(
        fn=cmd_train_branch)

    sp = with_config(sub.add_parser("eval", help="verification or open-set identification"))
    sp.add_argument("task", choices=["verify", "identify"])
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("select-branch", help="print the branch chosen for an input size")
    sp.add_argument("--w", type=int, required=True)
    sp.add_argument("--h", type=int, required=True)
    sp.add_argument("--indicator", choices=["min", "max", "avg"], default="max")
    sp.add_argument("--alloc", choices=["floor", "near", "ceil"], default="ceil")
    sp.add_argument("--branches", default="4,8,16,32")
    sp.set_defaults(fn=cmd_select_branch)

    sp = sub.add_parser("report", help="parameter or FLOP accounting as CSV")
    sp.add_argument("what", choices=["params", "flops"])
    sp.add_argument("--checkpoint")
    sp.add_argument("--spec", choices=["desk", "paper"], default="desk")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("dump-features", help="write tap-point activations as PGM grids")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=0)
    sp.set_defaults(fn=cmd_dump_features)

    sp = sub.add_parser("reproduce", help="run a packaged experiment")
    sp.add_argument("what", choices=["table1-gains", "table3-ladder", "fig1-curve", "baselines"])
    sp.add_argument("--out")
    sp.add_argument("--corpus")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trunk-epochs", type=int, default=0)
    sp.set_defaults(fn=cmd_reproduce)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"btnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
