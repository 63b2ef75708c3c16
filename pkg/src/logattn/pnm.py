"""Binary PGM (P5) and PPM (P6) read/write for 8-bit images."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected HxW or HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def decode(data: bytes) -> np.ndarray:
    m = _HEADER.match(data)
    if m is None:
        raise ValueError("not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=m.end())
    return pixels.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
