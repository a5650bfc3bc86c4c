"""Branch-to-trunk network: architecture spec, trunk, branches and accounting.

The trunk is a small residual network. A *unit* is either the stem
(conv-BN-ReLU) or a basic residual block. The tap point for resolution ``r``
is the first unit whose output is ``r x r``; the branch for ``r`` repeats the
trunk units up to and including the tap unit with every stride set to 1, so
an ``r x r`` image comes out as the ``r x r x C_r`` tap activation. The trunk
remainder ``T_r`` (units after the tap, pooling, embedding layer) is shared by
every resolution; only its batch-norm layers are duplicated per resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import BNParams, Tensor

BASE_BANK = "base"


@dataclass(frozen=True)
class UnitSpec:
    name: str
    kind: str  # "stem" | "block"
    stage: int
    index: int
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    in_res: int
    out_res: int

    @property
    def has_projection(self) -> bool:
        return self.kind == "block" and (self.stride != 1 or self.in_ch != self.out_ch)

    def conv_layers(self, stride: Optional[int] = None) -> List[Tuple[str, int, int, int, int]]:
        """(name, cin, cout, kernel, stride) for each conv in this unit."""
        s = self.stride if stride is None else stride
        if self.kind == "stem":
            return [(f"{self.name}.conv", self.in_ch, self.out_ch, self.kernel, s)]
        layers = [(f"{self.name}.conv1", self.in_ch, self.out_ch, 3, s),
                  (f"{self.name}.conv2", self.out_ch, self.out_ch, 3, 1)]
        if self.has_projection:
            layers.append((f"{self.name}.proj", self.in_ch, self.out_ch, 1, s))
        return layers

    def bn_layers(self) -> List[Tuple[str, int]]:
        if self.kind == "stem":
            return [(f"{self.name}.bn", self.out_ch)]
        out = [(f"{self.name}.bn1", self.out_ch), (f"{self.name}.bn2", self.out_ch)]
        if self.has_projection:
            out.append((f"{self.name}.proj_bn", self.out_ch))
        return out


@dataclass
class ModelSpec:
    canonical_size: int = 32
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stages: List[Tuple[int, int, int]] = field(default_factory=lambda: [(32, 2, 2), (64, 2, 2), (128, 2, 2)])
    embedding_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        self.validate()

    @classmethod
    def desk(cls) -> "ModelSpec":
        return cls()

    @classmethod
    def paper(cls) -> "ModelSpec":
        """112-pixel preset with taps at {112, 56, 28, 14, 7} (basic-block analog of ResNet50)."""
        return cls(canonical_size=112, stem_channels=64, stages=[(64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 2)],
                   embedding_dim=512)

    def units(self) -> List[UnitSpec]:
        units = []
        res = self.canonical_size
        out_res = T.conv_output_size(res, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        units.append(UnitSpec("stem", "stem", 0, 0, self.in_channels, self.stem_channels, self.stem_kernel,
                              self.stem_stride, res, out_res))
        ch, res = self.stem_channels, out_res
        for si, (out_ch, n_blocks, stride) in enumerate(self.stages, start=1):
            for ui in range(n_blocks):
                s = stride if ui == 0 else 1
                out_res = T.conv_output_size(res, 3, s, 1)
                units.append(UnitSpec(f"s{si}u{ui}", "block", si, ui, ch, out_ch, 3, s, res, out_res))
                ch, res = out_ch, out_res
        return units

    def tap_units(self) -> Dict[int, int]:
        """Resolution -> index (into ``units()``) of the first unit producing that size."""
        taps: Dict[int, int] = {}
        for i, u in enumerate(self.units()):
            taps.setdefault(u.out_res, i)
        return taps

    def tap_points(self) -> Dict[int, Tuple[int, int]]:
        units = self.units()
        return {r: (units[i].stage, units[i].index) for r, i in self.tap_units().items()}

    def tap_shapes(self) -> Dict[int, Tuple[int, int, int]]:
        units = self.units()
        return {r: (units[i].out_ch, r, r) for r, i in self.tap_units().items()}

    @property
    def branch_resolutions(self) -> List[int]:
        """Supported branch resolutions, ascending: S / 2^i for every tap."""
        return sorted(self.tap_units())

    def validate(self) -> None:
        if self.canonical_size < 1 or self.embedding_dim < 1:
            raise ValueError("canonical size and embedding dim must be positive")
        if not self.stages:
            raise ValueError("at least one stage required")
        res = sorted(self.tap_units(), reverse=True)
        for i, r in enumerate(res):
            if r * (2 ** i) != res[0]:
                raise ValueError(f"tap resolutions {res} are not S/2^i")
        if res[0] != self.canonical_size:
            raise ValueError("stem must preserve the canonical resolution")

    def to_dict(self) -> dict:
        return {"canonical_size": self.canonical_size, "stem_channels": self.stem_channels,
                "stem_kernel": self.stem_kernel, "stem_stride": self.stem_stride,
                "stages": [list(s) for s in self.stages], "embedding_dim": self.embedding_dim,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "stages": [tuple(s) for s in d["stages"]]})


# ---------------------------------------------------------------------------
# unit forward


def _unit_forward(x: Tensor, unit: UnitSpec, weights: Dict[str, Tensor], bank: Dict[str, BNParams],
                  train: bool, stride: Optional[int] = None, update_stats: bool = True) -> Tensor:
    convs = unit.conv_layers(stride)
    bns = unit.bn_layers()
    if unit.kind == "stem":
        name, _, _, k, s = convs[0]
        y = T.conv2d(x, weights[name], None, s, k // 2)
        return T.relu(T.batchnorm(y, bank[bns[0][0]], train, update_stats))
    (c1, _, _, _, s1), (c2, _, _, _, _) = convs[:2]
    y = T.relu(T.batchnorm(T.conv2d(x, weights[c1], None, s1, 1), bank[bns[0][0]], train, update_stats))
    y = T.batchnorm(T.conv2d(y, weights[c2], None, 1, 1), bank[bns[1][0]], train, update_stats)
    if unit.has_projection:
        pname, _, _, _, ps = convs[2]
        short = T.batchnorm(T.conv2d(x, weights[pname], None, ps, 0), bank[bns[2][0]], train, update_stats)
    else:
        short = x
    return T.relu(T.add(y, short))


def _init_weights(layers, rng: np.random.Generator) -> Dict[str, Tensor]:
    return {name: Tensor(T.he_normal((cout, cin, k, k), rng), requires_grad=True, name=name)
            for name, cin, cout, k, _ in layers}


# ---------------------------------------------------------------------------
# trunk


class TrunkModel:
    """Shared conv/linear weights, per-resolution BN banks and the classifier head.

    ``bn["base"]`` covers every BN layer and is used for canonical-size input.
    ``bn[r]`` for a branch resolution ``r`` covers only the BN layers of ``T_r``.
    """

    def __init__(self, spec: ModelSpec, weights: Dict[str, Tensor], bn: Dict, head=None):
        self.spec = spec
        self.units = spec.units()
        self.weights = weights
        self.bn = bn
        self.head = head

    # -- structure --
    def conv_layers(self):
        for u in self.units:
            yield from u.conv_layers()

    def bn_layers(self, start: int = 0):
        for u in self.units[start:]:
            yield from u.bn_layers()

    def remainder_start(self, r: int) -> int:
        """Index of the first unit of T_r."""
        taps = self.spec.tap_units()
        if r not in taps:
            raise ValueError(f"unsupported resolution {r}; supported: {sorted(taps)}")
        return taps[r] + 1

    def bank(self, key) -> Dict[str, BNParams]:
        return self.bn[key]

    def ensure_bank(self, r: int) -> Dict[str, BNParams]:
        """Create the resolution-r bank for T_r from the base bank if it does not exist."""
        if r not in self.bn:
            start = self.remainder_start(r)
            self.bn[r] = {name: self.bn[BASE_BANK][name].copy(tag=str(r)) for name, _ in self.bn_layers(start)}
        return self.bn[r]

    # -- forward --
    def run_units(self, x: Tensor, start: int, stop: int, bank: Dict[str, BNParams], train: bool,
                  update_stats: bool = True) -> Tensor:
        for u in self.units[start:stop]:
            x = _unit_forward(x, u, self.weights, bank, train, update_stats=update_stats)
        return x

    def head_forward(self, x: Tensor) -> Tensor:
        pooled = T.global_avg_pool(x)
        emb = T.linear(pooled, self.weights["embed.w"], self.weights["embed.b"])
        return T.l2_normalize(emb)

    def forward(self, x: Tensor, train: bool = False, bank_key=BASE_BANK, update_stats: bool = True) -> Tensor:
        """Canonical-size forward: image batch -> unit-norm embeddings."""
        S = self.spec.canonical_size
        if x.shape[1:] != (self.spec.in_channels, S, S):
            raise ValueError(f"trunk expects N x {self.spec.in_channels} x {S} x {S}, got {x.shape}")
        y = self.run_units(x, 0, len(self.units), self.bn[bank_key], train, update_stats)
        return self.head_forward(y)

    def forward_remainder(self, z: Tensor, r: int, train: bool = False, update_stats: bool = True) -> Tensor:
        """T_r: tap-point feature map -> embedding, with the resolution-r bank."""
        start = self.remainder_start(r)
        expected = self.spec.tap_shapes()[r]
        if z.shape[1:] != expected:
            raise ValueError(f"T_{r} expects N x {expected}, got {z.shape}")
        y = self.run_units(z, start, len(self.units), self.bn[r], train, update_stats)
        return self.head_forward(y)

    # -- parameter views --
    def shared_params(self) -> Dict[str, Tensor]:
        return dict(self.weights)

    def bank_params(self, key) -> Dict[str, Tensor]:
        out = {}
        for name, p in self.bn[key].items():
            out[f"{name}.gamma"] = p.gamma
            out[f"{name}.beta"] = p.beta
        return out

    def copy(self) -> "TrunkModel":
        weights = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.weights.items()}
        bn = {key: {n: p.copy() for n, p in bank.items()} for key, bank in self.bn.items()}
        head = self.head.copy() if self.head is not None else None
        return TrunkModel(self.spec, weights, bn, head)


def build_trunk(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> TrunkModel:
    """He-normal conv/linear weights, zero bias, unit/zero BN; deterministic per seed."""
    rng = np.random.default_rng([seed, 0x7275])
    units = spec.units()
    layers = [l for u in units for l in u.conv_layers()]
    weights = _init_weights(layers, rng)
    last = units[-1].out_ch
    weights["embed.w"] = Tensor(T.he_normal((spec.embedding_dim, last), rng), requires_grad=True, name="embed.w")
    weights["embed.b"] = Tensor(np.zeros(spec.embedding_dim, dtype=T.DEFAULT_DTYPE), requires_grad=True,
                                name="embed.b")
    base = {name: BNParams.create(ch, BASE_BANK) for u in units for name, ch in u.bn_layers()}
    trunk = TrunkModel(spec, weights, {BASE_BANK: base})
    if dtype != T.DEFAULT_DTYPE:
        cast_model(trunk, dtype)
    return trunk


def tap_feature(trunk: TrunkModel, x: Tensor, r: int) -> Tensor:
    """Trunk activation at the tap point for ``r`` (canonical input, base bank, inference BN)."""
    stop = trunk.remainder_start(r)
    S = trunk.spec.canonical_size
    if x.shape[2:] != (S, S):
        raise ValueError(f"tap_feature expects canonical {S}x{S} input")
    return trunk.run_units(x, 0, stop, trunk.bn[BASE_BANK], train=False)


# ---------------------------------------------------------------------------
# branches


class BranchNet:
    """Same-resolution replica of the trunk prefix for one input resolution."""

    def __init__(self, spec: ModelSpec, r: int, weights: Dict[str, Tensor], bn: Dict[str, BNParams]):
        self.spec = spec
        self.r = r
        stop = spec.tap_units()[r] + 1
        self.units = spec.units()[:stop]
        self.weights = weights
        self.bn = bn

    @property
    def out_shape(self) -> Tuple[int, int, int]:
        return (self.units[-1].out_ch, self.r, self.r)

    def conv_layers(self):
        for u in self.units:
            yield from u.conv_layers(stride=1)

    def bn_layers(self):
        for u in self.units:
            yield from u.bn_layers()

    def forward(self, x: Tensor, train: bool = False, update_stats: bool = True) -> Tensor:
        if x.shape[1:] != (self.spec.in_channels, self.r, self.r):
            raise ValueError(f"branch {self.r} expects N x {self.spec.in_channels} x {self.r} x {self.r}, "
                             f"got {x.shape}")
        for u in self.units:
            x = _unit_forward(x, u, self.weights, self.bn, train, stride=1, update_stats=update_stats)
        return x

    def params(self) -> Dict[str, Tensor]:
        out = dict(self.weights)
        for name, p in self.bn.items():
            out[f"{name}.gamma"] = p.gamma
            out[f"{name}.beta"] = p.beta
        return out

    def copy(self) -> "BranchNet":
        return BranchNet(self.spec, self.r,
                         {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                          for k, v in self.weights.items()},
                         {n: p.copy() for n, p in self.bn.items()})


def build_branch(spec: ModelSpec, r: int, seed: int = 0, trunk: Optional[TrunkModel] = None) -> BranchNet:
    """Branch for resolution ``r``; copies trunk-prefix weights and base-bank BN when ``trunk`` is given."""
    if r not in spec.tap_units():
        raise ValueError(f"unsupported branch resolution {r}; supported: {spec.branch_resolutions}")
    stop = spec.tap_units()[r] + 1
    units = spec.units()[:stop]
    layers = [l for u in units for l in u.conv_layers(stride=1)]
    rng = np.random.default_rng([seed, 0x6272, r])
    weights = _init_weights(layers, rng)
    bn = {name: BNParams.create(ch, str(r)) for u in units for name, ch in u.bn_layers()}
    if trunk is not None:
        for name, w in weights.items():
            src = trunk.weights.get(name)
            if src is not None and src.shape == w.shape:
                w.data = src.data.copy()
        for name in bn:
            bn[name] = trunk.bn[BASE_BANK][name].copy(tag=str(r))
    dtype = trunk.weights["embed.w"].dtype if trunk is not None else T.DEFAULT_DTYPE
    branch = BranchNet(spec, r, weights, bn)
    if dtype != T.DEFAULT_DTYPE:
        cast_model(branch, dtype)
    return branch


class BTNetModel:
    """One trunk plus a branch per supported resolution."""

    def __init__(self, trunk: TrunkModel, branches: Optional[Dict[int, BranchNet]] = None):
        self.trunk = trunk
        self.branches: Dict[int, BranchNet] = {}
        for r, b in (branches or {}).items():
            self.add_branch(b)

    @property
    def spec(self) -> ModelSpec:
        return self.trunk.spec

    def add_branch(self, branch: BranchNet) -> None:
        expected = self.spec.tap_shapes()[branch.r]
        if branch.out_shape != expected:
            raise ValueError(f"branch {branch.r} outputs {branch.out_shape}, tap expects {expected}")
        self.trunk.ensure_bank(branch.r)
        self.branches[branch.r] = branch

    def forward(self, x: Tensor, r: int, train: bool = False, update_stats: bool = True) -> Tensor:
        if r not in self.branches:
            raise ValueError(f"no branch for resolution {r}")
        z = self.branches[r].forward(x, train, update_stats)
        return self.trunk.forward_remainder(z, r, train, update_stats)


def assemble(trunk: TrunkModel, resolutions=None, seed: int = 0) -> BTNetModel:
    """BTNet with every branch initialized from the trunk prefix."""
    res = trunk.spec.branch_resolutions if resolutions is None else resolutions
    return BTNetModel(trunk, {r: build_branch(trunk.spec, r, seed, trunk) for r in res})


def forward_btnet(model: BTNetModel, x: Tensor, r: int, train: bool = False) -> Tensor:
    """Embedding T_r(B_r(x)) for a batch already resized to the branch resolution."""
    return model.forward(x, r, train)


def cast_model(model, dtype) -> None:
    """Cast every parameter and BN statistic in place (used for 64-bit gradient checks)."""
    for w in model.weights.values():
        w.data = w.data.astype(dtype)
    banks = model.bn.values() if isinstance(model, TrunkModel) else [model.bn]
    for bank in banks:
        for p in bank.values():
            p.gamma.data = p.gamma.data.astype(dtype)
            p.beta.data = p.beta.data.astype(dtype)
            p.running_mean = p.running_mean.astype(dtype)
            p.running_var = p.running_var.astype(dtype)


# ---------------------------------------------------------------------------
# accounting


def _conv_count(layers) -> int:
    return sum(cin * cout * k * k for _, cin, cout, k, _ in layers)


def _bn_stored(bn_layers) -> int:
    return sum(4 * ch for _, ch in bn_layers)


def branch_param_count(spec: ModelSpec, r: int) -> int:
    stop = spec.tap_units()[r] + 1
    units = spec.units()[:stop]
    return (_conv_count(l for u in units for l in u.conv_layers(stride=1))
            + _bn_stored(b for u in units for b in u.bn_layers()))


def trunk_param_count(spec: ModelSpec) -> int:
    units = spec.units()
    emb = spec.embedding_dim * units[-1].out_ch + spec.embedding_dim
    return (_conv_count(l for u in units for l in u.conv_layers()) + emb
            + _bn_stored(b for u in units for b in u.bn_layers()))


def trunk_shared_count(spec: ModelSpec) -> int:
    """Conv + embedding weights of the trunk (stored once, used by every resolution)."""
    units = spec.units()
    return _conv_count(l for u in units for l in u.conv_layers()) + spec.embedding_dim * (units[-1].out_ch + 1)


def remainder_bn_count(spec: ModelSpec, r: int) -> int:
    start = spec.tap_units()[r] + 1
    return _bn_stored(b for u in spec.units()[start:] for b in u.bn_layers())


def count_params(model, mode: str = "branch_plus_bn") -> Dict[int, int]:
    """Stored values needed per resolution.

    ``full_finetune``: a separately fine-tuned copy of the whole trunk plus the
    branch. ``branch_plus_bn``: the branch plus the resolution's BN bank in T_r
    (the trunk itself is shared). BN layers count gamma, beta and both running
    statistics.
    """
    spec = model.spec
    out = {}
    for r in spec.branch_resolutions:
        if mode == "full_finetune":
            out[r] = trunk_param_count(spec) + branch_param_count(spec, r)
        elif mode == "branch_plus_bn":
            out[r] = branch_param_count(spec, r) + remainder_bn_count(spec, r)
        else:
            raise ValueError(f"unknown counting mode {mode!r}")
    return out


def conv_flops(cin: int, cout: int, k: int, h_out: int, w_out: int, bias: bool = False) -> int:
    return 2 * k * k * cin * cout * h_out * w_out + (cout * h_out * w_out if bias else 0)


def linear_flops(n_in: int, n_out: int, bias: bool = True) -> int:
    return 2 * n_in * n_out + (n_out if bias else 0)


def _unit_layer_flops(unit: UnitSpec, in_res: int, stride1: bool) -> Tuple[List[Tuple[str, int]], int]:
    """Per-layer FLOPs of one unit at the given input resolution, in execution order."""
    convs = {name.rsplit(".", 1)[1]: (name, cin, cout, k, s)
             for name, cin, cout, k, s in unit.conv_layers(stride=1 if stride1 else None)}
    bns = [name for name, _ in unit.bn_layers()]
    out: List[Tuple[str, int]] = []

    def conv(key, res_in, pad):
        name, cin, cout, k, s = convs[key]
        o = T.conv_output_size(res_in, k, s, pad)
        out.append((name, conv_flops(cin, cout, k, o, o)))
        return o

    if unit.kind == "stem":
        o = conv("conv", in_res, unit.kernel // 2)
        elems = unit.out_ch * o * o
        out += [(bns[0], 2 * elems), (f"{unit.name}.relu", elems)]
        return out, o
    o = conv("conv1", in_res, 1)
    elems = unit.out_ch * o * o
    out += [(bns[0], 2 * elems), (f"{unit.name}.relu1", elems)]
    conv("conv2", o, 1)
    out.append((bns[1], 2 * elems))
    if unit.has_projection:
        conv("proj", in_res, 0)
        out.append((bns[2], 2 * elems))
    out += [(f"{unit.name}.add", elems), (f"{unit.name}.relu2", elems)]
    return out, o


def layer_flops(model, r: Optional[int] = None) -> List[Tuple[str, int]]:
    """(layer, FLOPs) along the B_r + T_r path in execution order (r=None: the trunk at canonical size).

    Conv: 2*K^2*Cin*Cout*Hout*Wout; linear: 2*in*out + out; BN: 2 per element;
    ReLU and residual add: 1 per element; pooling: 1 per input element;
    l2 normalization: 3 per embedding element.
    """
    spec = model.spec
    units = spec.units()
    tap = -1 if r is None else spec.tap_units()[r]
    res = spec.canonical_size if r is None else r
    out: List[Tuple[str, int]] = []
    for i, u in enumerate(units):
        layers, res = _unit_layer_flops(u, res, stride1=i <= tap)
        prefix = f"branch{r}/" if i <= tap else ""
        out += [(prefix + name, f) for name, f in layers]
    last = units[-1].out_ch
    out.append(("pool", last * res * res))
    out.append(("embed", linear_flops(last, spec.embedding_dim)))
    out.append(("l2norm", 3 * spec.embedding_dim))
    return out


def count_flops(model, r: Optional[int] = None) -> int:
    """Total inference FLOPs of the B_r + T_r path (see :func:`layer_flops`)."""
    return sum(f for _, f in layer_flops(model, r))
