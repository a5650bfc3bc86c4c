"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Unknown keys are rejected. Every command writes the fully-resolved config
next to its outputs so a run can be repeated from that file alone.
"""
from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from .select import SelectionPolicy
from .train import REGIMES, Regime, TrainConfig

RESOLVED_NAME = "config.resolved.txt"
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_REGIME_FIELDS = {f.name for f in fields(Regime)}


@dataclass
class RunConfig:
    # data and outputs
    data: Optional[str] = None
    split: str = "train"
    eval_split: str = "gallery,probe"
    pairs: Optional[str] = None
    out_dir: str = "runs/default"
    trunk: Optional[str] = None
    checkpoint: Optional[str] = None
    # train
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
    # branch training
    resolution: int = 8
    regime: str = "full"
    from_scratch: Optional[bool] = None
    init_from_trunk: Optional[bool] = None
    freeze_classifier: Optional[bool] = None
    freeze_trunk: Optional[bool] = None
    distill: Optional[bool] = None
    # branch selection
    indicator: str = "max"
    allocation: str = "ceil"
    branch_set: Tuple[int, ...] = (4, 8, 16, 32)
    # evaluation
    model_type: str = "btnet"
    r1: int = 32
    r2: int = 8
    n_pairs: int = 3000
    rank: int = 20
    fpir: Tuple[float, ...] = (0.01, 0.1, 0.3)
    far: Tuple[float, ...] = (1e-3, 1e-2, 1e-1)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        self.train_config()
        self.regime_flags()
        self.policy()

    # ------------------------------------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_FIELDS if k != "log_path"})

    def regime_flags(self) -> Regime:
        """The named regime with any explicitly set flag overriding it."""
        base = REGIMES[self.regime]
        kw = {k: getattr(base, k) for k in _REGIME_FIELDS}
        kw.update({k: getattr(self, k) for k in _REGIME_FIELDS if getattr(self, k) is not None})
        return Regime(**kw)

    def policy(self) -> SelectionPolicy:
        return SelectionPolicy(self.indicator, self.allocation, list(self.branch_set))

    # ------------------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, overrides: Iterable[str] = ()) -> "RunConfig":
        values = parse_text(text)
        for item in overrides:
            key, val = _split(item, "override")
            values[key] = val
        return cls.from_strings(values)

    @classmethod
    def from_file(cls, path, overrides: Iterable[str] = ()) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    @classmethod
    def from_strings(cls, values: Dict[str, str]) -> "RunConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**{k: _coerce(v, hints[k], k) for k, v in values.items()})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def write_resolved(self, out_dir=None) -> Path:
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_NAME
        path.write_text(self.to_text())
        return path


def _split(line: str, what: str) -> Tuple[str, str]:
    if "=" not in line:
        raise ValueError(f"{what} {line!r} is not of the form key = value")
    key, val = line.split("=", 1)
    return key.strip(), val.strip()


def parse_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, val = _split(line, f"line {ln}:")
        if key in out:
            raise ValueError(f"line {ln}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin is tuple:
            return tuple(args[0](v.strip()) for v in text.split(",") if v.strip())
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        return hint(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {text!r} as {getattr(hint, '__name__', hint)}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)
