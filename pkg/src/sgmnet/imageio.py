"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import os
import re

import numpy as np

from .checkpoint import atomic_write_bytes


class ImageFormatError(ValueError):
    pass


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"expected H×W or H×W×3 image, got {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def decode_pnm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    m = _HEADER.match(raw)
    if m is None:
        raise ImageFormatError(f"{source}: not a binary PPM/PGM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{source}: only 8-bit images supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    body = raw[m.end():]
    if len(body) != need:
        raise ImageFormatError(f"{source}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(img))


write_pgm = write_ppm


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read(), str(path))
