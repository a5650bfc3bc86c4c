"""Bit-exact named-array container and model (de)serialization.

Layout: ``b"BTNT"``, u16 format version, u32 metadata length, UTF-8 JSON
metadata, then every array as little-endian float32, row-major, in the order
listed by the metadata.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .losses import MarginHead
from .model import BASE_BANK, BranchNet, BTNetModel, ModelSpec, TrunkModel
from .tensor import BNParams, Tensor

MAGIC = b"BTNT"
VERSION = 1


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index = [{"name": k, "shape": list(v.shape), "dtype": "float32"} for k, v in self.arrays.items()]
        header = json.dumps({"arrays": index, "meta": self.meta}, sort_keys=True, separators=(",", ":"))
        hb = header.encode("utf-8")
        parts = [MAGIC, struct.pack("<HI", VERSION, len(hb)), hb]
        parts += [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.arrays.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise ValueError("not a BTNT checkpoint")
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 4 + struct.calcsize("<HI")
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        arrays = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(np.float32)
            pos += 4 * count
        if pos != len(buf):
            raise ValueError("trailing bytes in checkpoint")
        return cls(arrays, header["meta"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def merged(self, delta: "Checkpoint") -> "Checkpoint":
        """This checkpoint with every array of ``delta`` added or overwritten."""
        arrays = dict(self.arrays)
        arrays.update(delta.arrays)
        meta = dict(self.meta)
        meta.update(delta.meta)
        return Checkpoint(arrays, meta)


def _put_bank(arrays: dict, prefix: str, bank: Dict[str, BNParams]) -> None:
    for name, p in bank.items():
        arrays[f"{prefix}/{name}/gamma"] = p.gamma.data
        arrays[f"{prefix}/{name}/beta"] = p.beta.data
        arrays[f"{prefix}/{name}/mean"] = p.running_mean
        arrays[f"{prefix}/{name}/var"] = p.running_var


def _get_bank(arrays: dict, prefix: str, tag: str) -> Dict[str, BNParams]:
    names = []
    for k in arrays:
        if k.startswith(prefix + "/") and k.endswith("/gamma"):
            names.append(k[len(prefix) + 1:-len("/gamma")])
    return {n: BNParams(Tensor(arrays[f"{prefix}/{n}/gamma"].copy(), requires_grad=True),
                        Tensor(arrays[f"{prefix}/{n}/beta"].copy(), requires_grad=True),
                        arrays[f"{prefix}/{n}/mean"].copy(), arrays[f"{prefix}/{n}/var"].copy(), tag)
            for n in names}


def _bank_key(key) -> str:
    return key if key == BASE_BANK else f"r{key}"


def trunk_arrays(trunk: TrunkModel) -> Dict[str, np.ndarray]:
    arrays = {f"w/{k}": v.data for k, v in trunk.weights.items()}
    for key, bank in trunk.bn.items():
        _put_bank(arrays, f"bn/{_bank_key(key)}", bank)
    if trunk.head is not None:
        arrays["head/w"] = trunk.head.weight.data
    return arrays


def branch_arrays(branch: BranchNet) -> Dict[str, np.ndarray]:
    arrays = {f"branch/{branch.r}/w/{k}": v.data for k, v in branch.weights.items()}
    _put_bank(arrays, f"branch/{branch.r}/bn", branch.bn)
    return arrays


def model_to_checkpoint(model, meta: Optional[dict] = None) -> Checkpoint:
    """Serialize a TrunkModel or BTNetModel (trunk, banks, head and branches)."""
    trunk = model.trunk if isinstance(model, BTNetModel) else model
    arrays = trunk_arrays(trunk)
    if isinstance(model, BTNetModel):
        for r in sorted(model.branches):
            arrays.update(branch_arrays(model.branches[r]))
    info = {"spec": trunk.spec.to_dict()}
    if trunk.head is not None:
        info["head"] = trunk.head.config()
    info.update(meta or {})
    return Checkpoint(arrays, info)


def trunk_from_checkpoint(ckpt: Checkpoint) -> TrunkModel:
    spec = ModelSpec.from_dict(ckpt.meta["spec"])
    a = ckpt.arrays
    weights = {k[2:]: Tensor(v.copy(), requires_grad=True, name=k[2:]) for k, v in a.items() if k.startswith("w/")}
    keys = sorted({k.split("/")[1] for k in a if k.startswith("bn/")})
    bn = {}
    for key in keys:
        real = BASE_BANK if key == BASE_BANK else int(key[1:])
        bn[real] = _get_bank(a, f"bn/{key}", str(real))
    head = None
    if "head/w" in a:
        head = MarginHead(Tensor(a["head/w"].copy(), requires_grad=True, name="head.w"), **ckpt.meta["head"])
    return TrunkModel(spec, weights, bn, head)


def model_from_checkpoint(ckpt: Checkpoint) -> BTNetModel:
    trunk = trunk_from_checkpoint(ckpt)
    rs = sorted({int(k.split("/")[1]) for k in ckpt.arrays if k.startswith("branch/")})
    model = BTNetModel(trunk)
    for r in rs:
        pre = f"branch/{r}/w/"
        weights = {k[len(pre):]: Tensor(v.copy(), requires_grad=True, name=k[len(pre):])
                   for k, v in ckpt.arrays.items() if k.startswith(pre)}
        bank = _get_bank(ckpt.arrays, f"branch/{r}/bn", str(r))
        model.add_branch(BranchNet(trunk.spec, r, weights, bank))
    return model
