"""Trunk, per-resolution baseline and branch training."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, model_to_checkpoint, trunk_arrays, branch_arrays, trunk_from_checkpoint
from .data import Dataset
from .losses import MarginHead, branch_distill_loss, classification_loss, cos_logits, influence_loss, total_loss
from .model import BASE_BANK, BTNetModel, ModelSpec, TrunkModel, build_branch, build_trunk, tap_feature
from .resample import resize_bilinear_batch
from .tensor import Tensor

log = logging.getLogger(__name__)

SCHEMES = ("none", "equal_set", "weighted_set", "uniform_interval", "fixed")
PAPER_SET_WEIGHTS = (0.3, 0.25, 0.2, 0.15, 0.1)
LOG_HEADER = ("step", "lr", "loss_influence", "loss_distill", "loss_total")


class TrainingDiverged(RuntimeError):
    pass


def default_set_weights(levels: int) -> Tuple[float, ...]:
    """Paper weights over S/2^i; with fewer levels the tail mass folds into the smallest size."""
    w = list(PAPER_SET_WEIGHTS[:levels])
    if levels < len(PAPER_SET_WEIGHTS):
        w[-1] += sum(PAPER_SET_WEIGHTS[levels:])
    elif levels > len(PAPER_SET_WEIGHTS):
        raise ValueError("no default weights for more than five levels")
    return tuple(w)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    base_lr: float = 0.1
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hflip: bool = True
    resolution_scheme: str = "none"
    resolution_levels: int = 4
    resolution_weights: Optional[Tuple[float, ...]] = None
    fixed_resolution: int = 0
    min_resolution: int = 4
    canonical_size: int = 32
    loss: str = "curricular"
    scale: float = 32.0
    margin: float = 0.3
    distill_weight: float = 0.5
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch norm")
        if self.resolution_scheme not in SCHEMES:
            raise ValueError(f"unknown resolution scheme {self.resolution_scheme!r}")
        if self.resolution_weights is not None:
            self.resolution_weights = tuple(float(w) for w in self.resolution_weights)
            if len(self.resolution_weights) != self.resolution_levels:
                raise ValueError("resolution weights must align with the candidate set")
            if abs(sum(self.resolution_weights) - 1.0) > 1e-9:
                raise ValueError("resolution weights must sum to 1")

    @property
    def candidate_set(self) -> List[int]:
        return [self.canonical_size // 2 ** i for i in range(self.resolution_levels)]

    @property
    def set_weights(self) -> Tuple[float, ...]:
        return self.resolution_weights or default_set_weights(self.resolution_levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution_weights"] = list(self.set_weights) if self.resolution_weights else None
        return d

    @classmethod
    def desk_trunk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk_branch(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 6, "base_lr": 0.01, "warmup_epochs": 0, **kw})

    @classmethod
    def paper_trunk(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 25, "batch_size": 128, "base_lr": 0.2, "warmup_epochs": 2,
                      "canonical_size": 112, "resolution_levels": 5, "scale": 64.0, "margin": 0.5, **kw})

    @classmethod
    def paper_branch(cls, **kw) -> "TrainConfig":
        return cls.paper_trunk(**{"epochs": 10, "base_lr": 0.02, "warmup_epochs": 0, **kw})


@dataclass(frozen=True)
class Regime:
    from_scratch: bool = False
    init_from_trunk: bool = True
    freeze_classifier: bool = False
    freeze_trunk: bool = False
    distill: bool = False

    def __post_init__(self):
        if self.from_scratch == self.init_from_trunk:
            raise ValueError("a regime either starts from scratch or from the trunk")
        if self.from_scratch and (self.freeze_trunk or self.freeze_classifier):
            raise ValueError("a scratch model has no pretrained trunk or classifier to freeze")


REGIMES: Dict[str, Regime] = {
    "scratch": Regime(from_scratch=True, init_from_trunk=False),
    "pretraining": Regime(),
    "bct": Regime(freeze_classifier=True),
    "fix_trunk": Regime(freeze_classifier=True, freeze_trunk=True),
    "full": Regime(freeze_classifier=True, freeze_trunk=True, distill=True),
}
LADDER = tuple(REGIMES)


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# schedule and augmentation


def sample_resolution(cfg: TrainConfig, rng: np.random.Generator) -> int:
    scheme = cfg.resolution_scheme
    S = cfg.canonical_size
    if scheme == "none":
        return S
    if scheme == "fixed":
        return cfg.fixed_resolution
    if scheme == "equal_set":
        cands = cfg.candidate_set
        return cands[rng.integers(len(cands))]
    if scheme == "weighted_set":
        cands = cfg.candidate_set
        return cands[rng.choice(len(cands), p=np.asarray(cfg.set_weights))]
    return int(rng.integers(cfg.min_resolution, S + 1))


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up, then quadratic polynomial decay to zero at the last step."""
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    span = max(total - warm, 1)
    progress = min(max((step - warm) / span, 0.0), 1.0)
    return cfg.base_lr * (1.0 - progress) ** 2


def hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out


def degrade(images: np.ndarray, resolutions: Sequence[int]) -> np.ndarray:
    """Down-sample each image to its resolution and back up to the original size."""
    S = images.shape[-1]
    out = images.copy()
    res = np.asarray(resolutions)
    for r in np.unique(res):
        if r == S:
            continue
        sel = res == r
        out[sel] = resize_bilinear_batch(resize_bilinear_batch(images[sel], int(r), int(r)), S, S)
    return out


# ---------------------------------------------------------------------------
# optimizer / loop


class SGD:
    """Momentum SGD with decoupled bookkeeping of which tensors get weight decay."""

    def __init__(self, params: Sequence[Tensor], momentum: float, weight_decay: float,
                 decay: Optional[Sequence[Tensor]] = None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._decay = {id(p) for p in (decay or [])}
        self._vel = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if id(p) in self._decay:
                g = g + self.weight_decay * p.data
            v = self._vel[id(p)]
            v *= self.momentum
            v += g
            p.data = (p.data - lr * v).astype(p.data.dtype)


@dataclass
class RunResult:
    checkpoint: Checkpoint
    log: List[dict] = field(default_factory=list)


def _write_log(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_HEADER, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(float(row[k])) if k != "step" else row[k]) for k in LOG_HEADER})


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _run(step_fn: Callable, n: int, cfg: TrainConfig, opt: SGD, data_rng) -> List[dict]:
    steps_per_epoch = len(list(range(0, n, cfg.batch_size)))
    if n % cfg.batch_size == 1:
        steps_per_epoch -= 1
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, data_rng):
            lr = lr_at(step, cfg, steps_per_epoch)
            opt.zero_grad()
            try:
                loss, parts = step_fn(idx, epoch)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError("non-finite loss")
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"training diverged at step {step} (epoch {epoch}, lr {lr:.4g}): {exc}")
            opt.step(lr)
            rows.append({"step": step, "lr": lr, "loss_influence": parts[0], "loss_distill": parts[1],
                         "loss_total": loss.item(), "epoch": epoch})
            step += 1
        log.debug("epoch %d done, loss %.4f", epoch, rows[-1]["loss_total"] if rows else float("nan"))
    if cfg.log_path:
        _write_log(cfg.log_path, rows)
    return rows


def _accuracy(emb: Tensor, labels: np.ndarray, head: MarginHead) -> float:
    with T.no_grad():
        cos = cos_logits(emb, head).data
    return float((cos.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# trunk and baselines


def _make_head(cfg: TrainConfig, num_ids: int, dim: int, seed: int) -> MarginHead:
    return MarginHead.create(num_ids, dim, seed, kind=cfg.loss, scale=cfg.scale, margin=cfg.margin)


def train_trunk(cfg: TrainConfig, dataset: Dataset, spec: Optional[ModelSpec] = None,
                init_seed: Optional[int] = None) -> RunResult:
    """Train trunk + classifier on canonical-size images with the configured resolution scheme."""
    spec = spec or ModelSpec(canonical_size=cfg.canonical_size)
    if dataset.images.shape[-1] != spec.canonical_size:
        raise ValueError("dataset images must be at the canonical size")
    seed = cfg.seed if init_seed is None else init_seed
    trunk = build_trunk(spec, seed)
    trunk.head = _make_head(cfg, dataset.num_ids, spec.embedding_dim, seed)
    data_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    decay = [w for k, w in trunk.weights.items() if not k.endswith(".b")] + [trunk.head.weight]
    params = list(trunk.weights.values()) + list(trunk.bank_params(BASE_BANK).values()) + [trunk.head.weight]
    opt = SGD(params, cfg.momentum, cfg.weight_decay, decay)
    correct = []

    def step_fn(idx, epoch):
        x = dataset.images[idx]
        if cfg.hflip:
            x = hflip(x, aug_rng)
        if cfg.resolution_scheme != "none":
            x = degrade(x, [sample_resolution(cfg, aug_rng) for _ in idx])
        y = dataset.labels[idx]
        emb = trunk.forward(Tensor(x), train=True)
        if epoch == cfg.epochs - 1:
            correct.append((_accuracy(emb, y, trunk.head), len(idx)))
        loss = classification_loss(emb, y, trunk.head)
        return loss, (loss.item(), 0.0)

    rows = _run(step_fn, len(dataset), cfg, opt, data_rng)
    acc = sum(a * n for a, n in correct) / max(sum(n for _, n in correct), 1)
    ckpt = model_to_checkpoint(trunk, {"kind": "trunk", "train": cfg.to_dict(), "init_seed": seed,
                                       "train_accuracy": acc})
    return RunResult(ckpt, rows)


def train_mm(cfg: TrainConfig, dataset: Dataset, r: int, spec: Optional[ModelSpec] = None) -> RunResult:
    """Independently trained per-resolution model: every image degraded to r x r and back."""
    cfg_r = replace(cfg, resolution_scheme="fixed" if r != cfg.canonical_size else "none", fixed_resolution=r)
    res = train_trunk(cfg_r, dataset, spec, init_seed=derived_seed(cfg.seed, 0x6D6D, r))
    res.checkpoint.meta["kind"] = "mm"
    res.checkpoint.meta["resolution"] = r
    return res


# ---------------------------------------------------------------------------
# branches


def train_branch(trunk_ckpt: Checkpoint, r: int, regime: Regime, cfg: TrainConfig, dataset: Dataset) -> RunResult:
    """Train the resolution-r branch under a regime; returns a checkpoint delta.

    The delta holds the branch, the resolution-r BN bank and, for regimes that
    update them, the trunk weights and classifier.
    """
    if trunk_ckpt.meta.get("kind") not in ("trunk", "mm") or "head/w" not in trunk_ckpt.arrays:
        raise ValueError("train_branch needs a trunk checkpoint that carries its classifier")
    base = trunk_from_checkpoint(trunk_ckpt)
    spec = base.spec
    if r not in spec.branch_resolutions:
        raise ValueError(f"unsupported branch resolution {r}")
    if base.head.num_ids != dataset.num_ids:
        raise ValueError("dataset identities do not match the trunk classifier")

    if regime.from_scratch:
        seed = derived_seed(cfg.seed, 0x7363, r)
        trunk = build_trunk(spec, seed)
        head = _make_head(cfg, dataset.num_ids, spec.embedding_dim, seed)
        branch = build_branch(spec, r, seed)
    else:
        trunk = base.copy()
        head = trunk.head
        branch = build_branch(spec, r, cfg.seed, trunk=base)
        if regime.freeze_classifier:
            head = base.head.freeze()
    trunk.head = head
    trunk.bn.pop(r, None)
    model = BTNetModel(trunk, {r: branch})

    params = list(branch.params().values()) + list(trunk.bank_params(r).values())
    decay = list(branch.weights.values())
    if not regime.freeze_trunk:
        params += list(trunk.weights.values())
        decay += [w for k, w in trunk.weights.items() if not k.endswith(".b")]
    if not head.frozen:
        params.append(head.weight)
        decay.append(head.weight)
    opt = SGD(params, cfg.momentum, cfg.weight_decay, decay)
    data_rng = np.random.default_rng([cfg.seed, 3, r])
    aug_rng = np.random.default_rng([cfg.seed, 4, r])
    S = spec.canonical_size

    def step_fn(idx, epoch):
        x_hr = dataset.images[idx]
        if cfg.hflip:
            x_hr = hflip(x_hr, aug_rng)
        x_r = x_hr if r == S else resize_bilinear_batch(x_hr, r, r)
        y = dataset.labels[idx]
        z = branch.forward(Tensor(x_r), train=True)
        emb = trunk.forward_remainder(z, r, train=True)
        if regime.freeze_classifier:
            cls_loss = influence_loss(emb, y, head)
        else:
            cls_loss = classification_loss(emb, y, head)
        distill = None
        if regime.distill:
            with T.no_grad():
                z_s = tap_feature(base, Tensor(x_hr), r)
            distill = branch_distill_loss(z, z_s)
        loss = total_loss(cls_loss, distill, cfg.distill_weight)
        return loss, (cls_loss.item(), distill.item() if distill is not None else 0.0)

    rows = _run(step_fn, len(dataset), cfg, opt, data_rng)

    arrays = branch_arrays(branch)
    full = trunk_arrays(trunk)
    arrays.update({k: v for k, v in full.items() if k.startswith(f"bn/r{r}/")})
    if not regime.freeze_trunk:
        arrays.update({k: v for k, v in full.items() if k.startswith("w/")})
    if not head.frozen:
        arrays["head/w"] = head.weight.data
    meta = {"kind": "branch", "resolution": r, "regime": asdict(regime), "train": cfg.to_dict(),
            "trunk_modified": not regime.freeze_trunk}
    if not head.frozen:
        meta["head"] = head.config()
    return RunResult(Checkpoint(arrays, meta), rows)
