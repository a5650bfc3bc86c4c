"""Binary NetPBM (P5 grayscale / P6 RGB, 8-bit) reading and writing.

Images are float arrays in [0, 1] shaped (H, W) or (H, W, 3).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(buf: bytes, count: int, pos: int):
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated NetPBM header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace byte precedes the raster


def decode(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported NetPBM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise ValueError("only 8-bit NetPBM is supported")
    ch = 1 if magic == b"P5" else 3
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    img = raster.reshape(h, w, ch).astype(np.float32) / maxval
    return img[:, :, 0] if ch == 1 else img


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, img.shape[1], img.shape[0])
    return header + q.tobytes()


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))
