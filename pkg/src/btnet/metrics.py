"""Verification / open-set identification metrics and relative gains."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def aggregate(members) -> np.ndarray:
    """Template representation: l2-normalized mean of member embeddings."""
    m = np.asarray(members, dtype=np.float64)
    if m.ndim == 1:
        m = m[None]
    if len(m) == 0:
        raise ValueError("empty template")
    mean = m.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ValueError("template mean is the zero vector")
    return mean / norm


# ---------------------------------------------------------------------------
# verification


def _best_threshold(scores: np.ndarray, same: np.ndarray) -> float:
    """Threshold (predict same iff score >= t) maximizing accuracy; ties keep the strictest."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = same[order].astype(np.int64)
    # accepting the top k: correct = positives in top k + negatives outside
    tp = np.concatenate([[0], np.cumsum(y)])
    fp = np.concatenate([[0], np.cumsum(1 - y)])
    n_neg = len(y) - y.sum()
    correct = tp + (n_neg - fp)
    # only cut between distinct scores
    valid = np.ones(len(s) + 1, dtype=bool)
    valid[1:-1] = s[:-1] != s[1:]
    correct = np.where(valid, correct, -1)
    k = int(np.argmax(correct))
    if k == 0:
        return math.inf
    return float(s[k - 1])


def verification_accuracy(scores, same, n_folds: int = 10) -> float:
    """k-fold accuracy (percent): threshold fit on k-1 folds, scored on the held-out fold."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    # contiguous blocks, so interleaved genuine/impostor lists stay balanced per fold
    folds = np.arange(len(scores)) * n_folds // max(len(scores), 1)
    accs = []
    for f in range(n_folds):
        test = folds == f
        if not test.any() or test.all():
            raise ValueError("empty fold")
        t = _best_threshold(scores[~test], same[~test])
        accs.append(np.mean((scores[test] >= t) == same[test]))
    return 100.0 * float(np.mean(accs))


def pair_verification_accuracy(pairs, n_folds: int = 10) -> float:
    """Accuracy over (emb_a, emb_b, same) triples scored by cosine similarity."""
    scores = [cosine(a, b) for a, b, _ in pairs]
    return verification_accuracy(scores, [bool(s) for _, _, s in pairs], n_folds)


def pair_scores(emb_a: np.ndarray, emb_b: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", emb_a[pairs[:, 0]], emb_b[pairs[:, 1]])


def roc_auc(genuine, impostor) -> float:
    """Probability a genuine score beats an impostor score (ties count half)."""
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    allv = np.concatenate([g, i])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    # average ranks over ties
    start = 0
    while start < len(sorted_v):
        end = start
        while end + 1 < len(sorted_v) and sorted_v[end + 1] == sorted_v[start]:
            end += 1
        ranks[order[start:end + 1]] = 0.5 * (start + end) + 1.0
        start = end + 1
    rg = ranks[:len(g)].sum()
    return float((rg - len(g) * (len(g) + 1) / 2) / (len(g) * len(i)))


def _accept_threshold(negatives: np.ndarray, rate: float, candidates: Optional[np.ndarray] = None) -> float:
    """Smallest candidate t with mean(negatives >= t) <= rate (above every negative if none)."""
    neg = np.sort(np.asarray(negatives, dtype=np.float64))
    cands = neg if candidates is None else np.unique(np.concatenate([neg, candidates]))
    cands = np.sort(cands)
    n = len(neg)
    above = n - np.searchsorted(neg, cands, side="left")  # negatives >= t
    ok = above <= rate * n + 1e-12
    if ok.any():
        return float(cands[np.argmax(ok)])
    return float(np.nextafter(neg[-1], np.inf))


def tar_at_far(genuine, impostor, far: float) -> float:
    """True-accept rate at the most permissive threshold whose false-accept rate is <= far."""
    if not 0 < far < 1:
        raise ValueError("far must lie in (0, 1)")
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    if len(g) == 0 or len(i) == 0:
        raise ValueError("genuine and impostor scores must be non-empty")
    t = _accept_threshold(i, far, g)
    return float(np.mean(g >= t))


# ---------------------------------------------------------------------------
# open-set identification


def tpir_at_fpir(mated: np.ndarray, mated_ids: Sequence[int], non_mated: np.ndarray, gallery: np.ndarray,
                 gallery_ids: Sequence[int], rank: int = 20, fpir: float = 0.1) -> float:
    """Open-set true-positive identification rate.

    The threshold is set on the top gallery score of each non-mated probe so
    that at most ``fpir`` of them are accepted. A mated probe counts when its
    identity is within the top ``rank`` gallery entries and its top score
    clears the threshold.
    """
    gallery_ids = np.asarray(gallery_ids)
    if len(np.unique(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery identities must be distinct")
    non_mated = np.asarray(non_mated)
    if len(non_mated) == 0:
        raise ValueError("need non-mated probes")
    if not 0 <= fpir <= 1:
        raise ValueError("fpir must lie in [0, 1]")
    if 0 < fpir < 1.0 / len(non_mated):
        raise ValueError(f"fpir {fpir} is finer than {len(non_mated)} non-mated probes can resolve")
    nm_top = (non_mated @ gallery.T).max(axis=1)
    t = -math.inf if fpir >= 1 else _accept_threshold(nm_top, fpir)
    return _tpir_with_threshold(mated, mated_ids, gallery, gallery_ids, rank, t)


def _tpir_with_threshold(mated, mated_ids, gallery, gallery_ids, rank, t) -> float:
    scores = np.asarray(mated) @ np.asarray(gallery).T
    mated_ids = np.asarray(mated_ids)
    pos = {int(g): i for i, g in enumerate(gallery_ids)}
    true_col = np.array([pos[int(m)] for m in mated_ids])
    true_score = scores[np.arange(len(scores)), true_col]
    # rank of the true identity = 1 + number of strictly higher gallery scores
    r = 1 + (scores > true_score[:, None]).sum(axis=1)
    top = scores.max(axis=1)
    return float(np.mean((r <= rank) & (top >= t)))


def tpir_curve(mated, mated_ids, non_mated, gallery, gallery_ids, rank: int = 20):
    """(fpir, tpir) at every FPIR the non-mated set can realize, ascending."""
    n = len(non_mated)
    fpirs = np.arange(n + 1) / n
    return fpirs, np.array([tpir_at_fpir(mated, mated_ids, non_mated, gallery, gallery_ids, rank, f)
                            for f in fpirs])


def auc_tpir(fpir, tpir) -> float:
    """Trapezoidal area under TPIR vs FPIR."""
    x = np.asarray(fpir, dtype=np.float64)
    y = np.asarray(tpir, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two curve points")
    if np.any(np.diff(x) < 0):
        raise ValueError("FPIR values must be sorted ascending")
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# gains


def cross_res_gain(m: float, m_hr: float, m_mr: float) -> Optional[float]:
    """(m - m_hr) / |m_mr - m_hr|; None when the denominator vanishes."""
    d = abs(m_mr - m_hr)
    return None if d == 0 else (m - m_hr) / d


def same_res_gain(m: float, m_hr: float, m_r: float) -> Optional[float]:
    d = abs(m_r - m_hr)
    return None if d == 0 else (m - m_hr) / d


def format_gain(g: Optional[float]) -> str:
    return "—" if g is None else f"{g:+.2f}"


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    accuracy: Optional[float] = None
    tar_at_far: Dict[float, float] = field(default_factory=dict)
    tpir_at_fpir: Dict[float, float] = field(default_factory=dict)
    auc: Optional[float] = None
    gains: Dict[str, Optional[float]] = field(default_factory=dict)
    label: str = ""

    def rows(self):
        """(metric, value) with rates as percentages."""
        out = []
        if self.accuracy is not None:
            out.append(("accuracy", self.accuracy))
        out += [(f"tar@far={k:g}", 100 * v) for k, v in sorted(self.tar_at_far.items())]
        out += [(f"tpir@fpir={k:g}", 100 * v) for k, v in sorted(self.tpir_at_fpir.items())]
        if self.auc is not None:
            out.append(("auc", 100 * self.auc))
        out += [(f"gain:{k}", v) for k, v in self.gains.items()]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["label", "metric", "value"])
        for name, v in self.rows():
            wr.writerow([self.label, name, "—" if v is None else f"{v:.4f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.rows()
        width = max((len(n) for n, _ in rows), default=6)
        lines = [f"{self.label}" if self.label else ""]
        for name, v in rows:
            val = "—" if v is None else (format_gain(v) if name.startswith("gain:") else f"{v:.2f}")
            lines.append(f"  {name:<{width}}  {val}")
        return "\n".join(l for l in lines if l)
