"""Branch selection: map a native H x W input onto a supported branch resolution."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .resample import resize_bilinear

INDICATORS = ("min", "max", "avg")
ALLOCATIONS = ("floor", "near", "ceil")


@dataclass
class SelectionPolicy:
    indicator: str = "max"
    allocation: str = "ceil"
    branch_set: List[int] = field(default_factory=lambda: [4, 8, 16, 32])

    def __post_init__(self):
        if self.indicator not in INDICATORS:
            raise ValueError(f"indicator must be one of {INDICATORS}")
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"allocation must be one of {ALLOCATIONS}")
        self.branch_set = [int(b) for b in self.branch_set]
        if not self.branch_set or any(b2 <= b1 for b1, b2 in zip(self.branch_set, self.branch_set[1:])):
            raise ValueError("branch set must be non-empty and strictly ascending")

    def select(self, h: int, w: int) -> int:
        return allocate(resolution_indicator(h, w, self.indicator), self)


def resolution_indicator(h: int, w: int, mode: str) -> float:
    if h < 1 or w < 1:
        raise ValueError("image dimensions must be >= 1")
    if mode == "min":
        return float(min(h, w))
    if mode == "max":
        return float(max(h, w))
    if mode == "avg":
        return (h + w) / 2.0
    raise ValueError(f"unknown indicator {mode!r}")


def allocate(indicator: float, policy: SelectionPolicy) -> int:
    branches = policy.branch_set
    mode = policy.allocation
    if mode == "floor":
        below = [b for b in branches if b <= indicator]
        return below[-1] if below else branches[0]
    if mode == "ceil":
        above = [b for b in branches if b >= indicator]
        return above[0] if above else branches[-1]
    # near: ties go to the larger branch
    return min(branches, key=lambda b: (abs(b - indicator), -b))


def prepare_input(img: np.ndarray, branch_r: int) -> np.ndarray:
    """Anisotropic bilinear resize of an (H, W[, C]) image to branch_r x branch_r."""
    return resize_bilinear(img, branch_r, branch_r)


def strategy_table(sizes: Sequence[tuple], branch_set: Sequence[int]) -> dict:
    """{(indicator, allocation): [branch for each (h, w)]} over the full 3 x 3 grid."""
    return {(ind, alloc): [SelectionPolicy(ind, alloc, list(branch_set)).select(h, w) for h, w in sizes]
            for ind in INDICATORS for alloc in ALLOCATIONS}
