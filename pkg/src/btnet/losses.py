"""Angular-margin classification heads, influence loss and branch distillation."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("normface", "cosface", "arcface", "curricular")
COS_CLAMP = 1.0 - 1e-7


@dataclass
class MarginHead:
    """Classifier weights (num_ids x C_emb) plus margin-loss configuration.

    ``ema`` selects the curricular update: ``"batch"`` gives
    ``t <- alpha * r + (1 - alpha) * t``; ``"history"`` gives
    ``t <- (1 - alpha) * r + alpha * t`` (r = batch-mean target cosine).
    """
    weight: Tensor
    kind: str = "curricular"
    scale: float = 64.0
    margin: float = 0.5
    t: float = 0.0
    alpha: float = 0.99
    ema: str = "batch"
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if self.ema not in ("batch", "history"):
            raise ValueError(f"unknown ema placement {self.ema!r}")
        self.t = float(min(max(self.t, 0.0), 1.0))

    @classmethod
    def create(cls, num_ids: int, dim: int, seed: int = 0, **kw) -> "MarginHead":
        rng = np.random.default_rng([seed, 0x6865])
        w = rng.standard_normal((num_ids, dim)).astype(T.DEFAULT_DTYPE)
        return cls(Tensor(w, requires_grad=True, name="head.w"), **kw)

    @property
    def num_ids(self) -> int:
        return self.weight.shape[0]

    def copy(self, **changes) -> "MarginHead":
        w = Tensor(self.weight.data.copy(), requires_grad=self.weight.requires_grad, name="head.w")
        return replace(self, weight=w, **changes)

    def freeze(self) -> "MarginHead":
        """A frozen copy (kappa*): no weight gradients, no curricular-state updates."""
        h = self.copy(frozen=True)
        h.weight.requires_grad = False
        return h

    def config(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "margin": self.margin, "t": self.t,
                "alpha": self.alpha, "ema": self.ema}

    def update_t(self, batch_target_cos: float) -> None:
        if self.frozen:
            return
        r = float(batch_target_cos)
        if self.ema == "batch":
            t = self.alpha * r + (1.0 - self.alpha) * self.t
        else:
            t = (1.0 - self.alpha) * r + self.alpha * self.t
        self.t = float(min(max(t, 0.0), 1.0))


def cos_logits(emb: Tensor, head: MarginHead) -> Tensor:
    """Cosines between unit embeddings and row-normalized head weights, clamped away from +/-1."""
    if emb.ndim != 2 or emb.shape[1] != head.weight.shape[1]:
        raise ValueError(f"embedding dim {emb.shape} does not match head {head.weight.shape}")
    w = head.weight if not head.frozen else head.weight.detach()
    if w.dtype != emb.dtype:
        w = Tensor(w.data.astype(emb.dtype), requires_grad=w.requires_grad)
    cos = T.matmul(emb, T.transpose(T.l2_normalize(w)))
    return T.clip(cos, -COS_CLAMP, COS_CLAMP)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("labels must match the batch size")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("label out of range")
    return labels


def margin_logits(cos: Tensor, labels, head: MarginHead) -> Tensor:
    """Scaled logits with the head's margin applied to the target class."""
    n, k = cos.shape
    labels = _check_labels(labels, n, k)
    c = cos.data
    s, m = head.scale, head.margin
    rows = np.arange(n)
    out = s * c
    dout = np.full(c.shape, s, dtype=c.dtype)
    ct = c[rows, labels]
    if head.kind == "cosface":
        out[rows, labels] = s * (ct - m)
    elif head.kind in ("arcface", "curricular"):
        theta = np.arccos(ct)
        tgt = np.cos(theta + m)
        out[rows, labels] = s * tgt
        dout[rows, labels] = s * np.sin(theta + m) / np.sin(theta)
        if head.kind == "curricular":
            hard = c > tgt[:, None]
            hard[rows, labels] = False
            out = np.where(hard, s * c * (head.t + c), out)
            dout = np.where(hard, s * (head.t + 2.0 * c), dout)
    out = out.astype(c.dtype)
    dout = dout.astype(c.dtype)
    return T.make_op(out, (cos,), lambda g: (g * dout,))


def classification_loss(emb: Tensor, labels, head: MarginHead, update_state: bool = True) -> Tensor:
    """Softmax cross-entropy over margin logits; advances the curricular state of a trainable head."""
    cos = cos_logits(emb, head)
    loss = T.softmax_cross_entropy(margin_logits(cos, labels, head), labels)
    if update_state and head.kind == "curricular" and not head.frozen:
        labels = np.asarray(labels, dtype=np.int64)
        head.update_t(cos.data[np.arange(len(labels)), labels].mean())
    return loss


def influence_loss(emb: Tensor, labels, frozen_head: MarginHead) -> Tensor:
    """Classification loss of new embeddings against the pretrained (frozen) classifier."""
    if not frozen_head.frozen:
        raise ValueError("influence loss requires a frozen head")
    return classification_loss(emb, labels, frozen_head, update_state=False)


def branch_distill_loss(z_r: Tensor, z_s: Tensor) -> Tensor:
    """Batch mean of per-sample mean squared feature difference; ``z_s`` is treated as a constant."""
    if z_r.shape != z_s.shape:
        raise ValueError(f"distillation shapes differ: {z_r.shape} vs {z_s.shape}")
    # equal-size samples: mean of per-sample means == mean over all elements
    return T.mse(z_r, z_s.detach())


def total_loss(influence: Tensor, distill: Optional[Tensor], lam: float = 0.5) -> Tensor:
    if distill is None:
        return influence
    if not (np.isfinite(influence.data).all() and np.isfinite(distill.data).all()):
        raise FloatingPointError("non-finite loss component")
    return T.add(influence, T.scale(distill, lam))
