"""Binary portable graymap (P5, 8-bit) read/write."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(arr) -> np.ndarray:
    """Round to nearest (halves up) and clip to [0, 255]."""
    arr = np.asarray(arr, dtype=np.float64)
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, arr) -> None:
    data = to_uint8(arr)
    if data.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _tokens(buf: bytes, count: int):
    """Pull ``count`` whitespace-separated header tokens, skipping comments."""
    out, i = [], 2
    while len(out) < count:
        if i >= len(buf):
            raise ValueError("truncated PGM header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace():
                j += 1
            out.append(int(buf[i:j]))
            i = j
    # exactly one whitespace byte separates the header from the raster
    return out, i + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), start = _tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raster = buf[start:start + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64)
