"""Synthetic identity data, dataset manifests and pair/probe construction."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import netpbm
from .resample import resize_bilinear

MANIFEST_NAME = "manifest.tsv"


@dataclass
class Dataset:
    """In-memory images (N x 3 x S x S, values in [0, 1]) with integer identity labels."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_ids(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, mask) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask])

    def split_ids(self, n_train_ids: int) -> Tuple["Dataset", "Dataset"]:
        """Identities < n_train_ids for training, the rest relabelled from 0 for evaluation."""
        train = self.labels < n_train_ids
        held = self.subset(~train)
        held.labels = held.labels - n_train_ids
        return self.subset(train), held


# ---------------------------------------------------------------------------
# synthetic identities


def _smooth_field(rng: np.random.Generator, size: int, channels: int, max_freq: int, decay: float) -> np.ndarray:
    """Random sum of 2-D cosines with amplitude ~ 1/|f|^decay for 1 <= |f| <= max_freq."""
    coords = np.arange(size) / size
    out = np.zeros((channels, size, size))
    for ky in range(-max_freq, max_freq + 1):
        for kx in range(0, max_freq + 1):
            f = np.hypot(kx, ky)
            if f == 0 or f > max_freq or (kx == 0 and ky < 0):
                continue
            amp = f ** (-decay)
            phase = rng.uniform(0, 2 * np.pi, size=channels)
            weight = rng.standard_normal(channels) * amp
            arg = 2 * np.pi * (ky * coords[:, None] + kx * coords[None, :])
            out += weight[:, None, None] * np.cos(arg[None] + phase[:, None, None])
    return out


def identity_bases(n_ids: int, size: int, seed: int, max_freq: int = 8, decay: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x6964])
    bases = np.empty((n_ids, 3, size, size))
    for i in range(n_ids):
        f = _smooth_field(rng, size, 3, max_freq, decay)
        f = (f - f.mean()) / (f.std() + 1e-12)
        bases[i] = 0.5 + 0.18 * f
    return bases


def synth_arrays(n_ids: int, per_id: int, size: int = 32, seed: int = 0, max_shift: int = 2,
                 contrast: float = 0.2, noise: float = 0.04, max_freq: int = 8, decay: float = 0.5) -> Dataset:
    """Samples = identity base pattern + random shift, contrast/brightness jitter and noise."""
    if n_ids < 2:
        raise ValueError("need at least two identities")
    bases = identity_bases(n_ids, size, seed, max_freq, decay)
    rng = np.random.default_rng([seed, 0x736d])
    images = np.empty((n_ids * per_id, 3, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(n_ids), per_id)
    for idx, ident in enumerate(labels):
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        img = np.roll(bases[ident], (int(dy), int(dx)), axis=(1, 2))
        c = 1.0 + rng.uniform(-contrast, contrast)
        b = rng.uniform(-0.05, 0.05)
        img = 0.5 + c * (img - 0.5) + b + noise * rng.standard_normal(img.shape)
        images[idx] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    identity: int
    width: int
    height: int
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{e.path}\t{e.identity}\t{e.width}\t{e.height}\t{e.split}\n" for e in self.entries]
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str, root) -> "DatasetManifest":
        entries = []
        for ln, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"manifest line {ln}: expected 5 tab-separated fields")
            entries.append(ManifestEntry(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]))
        return cls(Path(root), entries)

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        m = cls.from_text(path.read_text(), path.parent)
        m.validate(check_paths)
        return m

    def validate(self, check_paths: bool = True) -> None:
        ids = sorted({e.identity for e in self.entries})
        if ids and ids != list(range(len(ids))):
            raise ValueError("identity ids must be dense integers from 0")
        if check_paths:
            for e in self.entries:
                if not (self.root / e.path).exists():
                    raise FileNotFoundError(self.root / e.path)

    def select(self, split: Optional[str] = None) -> List[ManifestEntry]:
        """Entries whose split tag is in a comma-separated list (None: all)."""
        if split is None:
            return list(self.entries)
        tags = {t.strip() for t in split.split(",")}
        return [e for e in self.entries if e.split in tags]

    def load(self, split: Optional[str] = None, size: Optional[int] = None) -> Dataset:
        """Decode the selected images; ``size`` resizes every image to size x size first."""
        chosen = self.select(split)
        imgs = []
        for e in chosen:
            img = netpbm.read(self.root / e.path)
            if img.ndim == 2:
                img = np.repeat(img[:, :, None], 3, axis=2)
            if size is not None and img.shape[:2] != (size, size):
                img = resize_bilinear(img, size, size)
            imgs.append(np.moveaxis(img, -1, 0))
        shapes = {i.shape for i in imgs}
        if len(shapes) > 1:
            raise ValueError("images in a split must share one size; pass a target size")
        arr = np.stack(imgs).astype(np.float32) if imgs else np.zeros((0, 3, 1, 1), np.float32)
        return Dataset(arr, np.array([e.identity for e in chosen]))


def _split_tag(ident: int, sample: int, n_train: int, n_ids: int) -> str:
    """Training ids -> train. Held-out ids: the first half are enrolled (first
    sample in the gallery, the rest probes); the second half only appear as
    non-mated probes."""
    if ident < n_train:
        return "train"
    enrolled = ident < n_train + (n_ids - n_train + 1) // 2
    return "gallery" if enrolled and sample == 0 else "probe"


def synth_data(out_dir, n_ids: int, per_id: int, size: int = 32, seed: int = 0,
               n_train_ids: Optional[int] = None) -> DatasetManifest:
    """Write a synthetic dataset as P6 files plus a manifest; deterministic per seed."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    ds = synth_arrays(n_ids, per_id, size, seed)
    n_train = n_ids if n_train_ids is None else n_train_ids
    entries = []
    for idx, (img, ident) in enumerate(zip(ds.images, ds.labels)):
        rel = f"id{ident:04d}/{idx:06d}.ppm"
        (out / rel).parent.mkdir(exist_ok=True)
        netpbm.write(out / rel, np.moveaxis(img, 0, -1))
        tag = _split_tag(int(ident), idx % per_id, n_train, n_ids)
        entries.append(ManifestEntry(rel, int(ident), size, size, tag))
    manifest = DatasetManifest(out, entries)
    manifest.write()
    return manifest


# ---------------------------------------------------------------------------
# evaluation pairs / probes


def make_pairs(labels: Sequence[int], n_pairs: int, seed: int = 0) -> np.ndarray:
    """(i, j, same) index triples, half genuine and half impostor, interleaved."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x7061])
    by_id = {int(k): np.flatnonzero(labels == k) for k in np.unique(labels)}
    multi = [k for k, v in by_id.items() if len(v) >= 2]
    if not multi or len(by_id) < 2:
        raise ValueError("need at least two identities, one with two samples")
    ids = np.array(sorted(by_id))
    out = np.empty((n_pairs, 3), dtype=np.int64)
    for p in range(n_pairs):
        if p % 2 == 0:
            k = multi[rng.integers(len(multi))]
            i, j = rng.choice(by_id[k], size=2, replace=False)
            out[p] = (i, j, 1)
        else:
            a, b = rng.choice(ids, size=2, replace=False)
            out[p] = (rng.choice(by_id[int(a)]), rng.choice(by_id[int(b)]), 0)
    return out


def write_pairs(path, pairs: np.ndarray, paths: Sequence[str]) -> None:
    """One pair per line: path_a, path_b, same flag (tab-separated)."""
    Path(path).write_text("".join(f"{paths[i]}\t{paths[j]}\t{s}\n" for i, j, s in pairs))


def read_pairs(path, paths: Sequence[str]) -> np.ndarray:
    """Pairs file -> (i, j, same) rows indexing ``paths``."""
    index = {p: k for k, p in enumerate(paths)}
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"pairs line {ln}: expected path_a, path_b, same")
        try:
            rows.append((index[parts[0]], index[parts[1]], int(parts[2])))
        except KeyError as exc:
            raise ValueError(f"pairs line {ln}: {exc.args[0]} is not in the evaluation split") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 3)
