"""Image resampling and the bilinear up-sampling error bound.

Images are float arrays with the spatial axes either first, (H, W) or
(H, W, C), or last for batches, (..., H, W). The public resize functions take
the channel-last image form; ``resize_bilinear_batch`` handles N x C x H x W.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

FOURTH_DIFF_KERNEL = np.array([[1.0, -2.0, 1.0],
                               [-2.0, 4.0, -2.0],
                               [1.0, -2.0, 1.0]])


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the interpolation weights of output sample i (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    idx = np.clip(np.floor(src + 0.5).astype(int), 0, n_in - 1)
    idx.setflags(write=False)
    return idx


def _check_dims(out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")


def resize_bilinear_batch(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of ``x``."""
    _check_dims(out_h, out_w)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = _bilinear_matrix(h, out_h).astype(x.dtype)
    rx = _bilinear_matrix(w, out_w).astype(x.dtype)
    out = np.matmul(np.matmul(ry, x), rx.T)
    return np.clip(out, 0.0, 1.0)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) image with half-pixel bilinear sampling."""
    img = np.asarray(img)
    if img.ndim == 2:
        return resize_bilinear_batch(img, out_h, out_w)
    return np.moveaxis(resize_bilinear_batch(np.moveaxis(img, -1, 0), out_h, out_w), 0, -1)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_dims(out_h, out_w)
    img = np.asarray(img)
    iy = _nearest_index(img.shape[0], out_h)
    ix = _nearest_index(img.shape[1], out_w)
    return img[iy][:, ix].copy()


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def mixed_fourth_difference(img: np.ndarray) -> np.ndarray:
    """Valid-region correlation with the 3x3 mixed fourth-difference kernel."""
    g = to_gray(img)
    h, w = g.shape
    if h < 3 or w < 3:
        raise ValueError("image must be at least 3x3")
    # separable: [1,-2,1] along rows then columns
    dy = g[:-2, :] - 2.0 * g[1:-1, :] + g[2:, :]
    return dy[:, :-2] - 2.0 * dy[:, 1:-1] + dy[:, 2:]


def error_upper_bound(img: np.ndarray, reduce: str = "mean") -> float:
    """Estimated bilinear interpolation error bound |d4f/dx2dy2| / 64, aggregated."""
    d = np.abs(mixed_fourth_difference(img)) / 64.0
    if reduce == "mean":
        return float(d.mean())
    if reduce == "max":
        return float(d.max())
    raise ValueError(f"unknown reduction {reduce!r}")


@dataclass
class ErrorCurve:
    resolutions: list
    mean_bound: list
    n_images: int

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError("resolutions must be strictly ascending")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["resolution", "mean_bound", "n_images"])
            for r, b in zip(self.resolutions, self.mean_bound):
                wr.writerow([r, repr(float(b)), self.n_images])

    @classmethod
    def from_csv(cls, path) -> "ErrorCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["resolution"]) for r in rows], [float(r["mean_bound"]) for r in rows],
                   int(rows[0]["n_images"]) if rows else 0)


def error_curve(images: Sequence[np.ndarray], resolutions: Iterable[int], canonical: int = 112,
                reduce: str = "mean") -> ErrorCurve:
    """Average error bound of each image after down-sampling canonical -> r."""
    res = sorted(int(r) for r in resolutions)
    if any(r < 3 for r in res):
        raise ValueError("resolution must be >= 3")
    if any(r > canonical for r in res):
        raise ValueError("resolutions must not exceed the canonical size")
    bounds = []
    for r in res:
        vals = []
        for img in images:
            if img.shape[:2] != (canonical, canonical):
                raise ValueError(f"image is {img.shape[:2]}, expected {canonical}x{canonical}")
            vals.append(error_upper_bound(resize_bilinear(img, r, r), reduce))
        bounds.append(float(np.mean(vals)))
    return ErrorCurve(res, bounds, len(images))


def texture_corpus(n: int, size: int = 112, seed: int = 0, exponent: float = 2.0) -> list:
    """Grayscale textures with a 1/f^exponent power spectrum, scaled to [0, 1].

    Power-law spectra are the usual stand-in for natural image statistics.
    """
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    amp = f ** (-exponent / 2.0)
    amp[0, 0] = 0.0
    out = []
    for _ in range(n):
        phase = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
        field_ = np.real(np.fft.ifft2(amp * phase))
        lo, hi = field_.min(), field_.max()
        out.append(((field_ - lo) / (hi - lo)).astype(np.float32))
    return out
