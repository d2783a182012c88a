"""Binary grid format shared by models, wavefield snapshots, gradients and shot records.

Layout: 16-byte header (magic ``OTF1``, nz as uint32 LE, nx as uint32 LE, four
reserved zero bytes) followed by ``nz * nx`` little-endian float64 values in
row-major order with depth as the slow index.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OTF1"
_HEADER = struct.Struct("<4sII4s")


class GridFormatError(ValueError):
    pass


def write_grid(path: str | Path, array: np.ndarray) -> Path:
    a = np.asarray(array, dtype="<f8")
    if a.ndim != 2:
        raise GridFormatError(f"expected a 2D array, got shape {a.shape}")
    nz, nx = a.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, nz, nx, b"\0\0\0\0"))
        fh.write(np.ascontiguousarray(a).tobytes())
    return path


def read_grid(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise GridFormatError(f"{path}: truncated header")
    magic, nz, nx, reserved = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if reserved != b"\0\0\0\0":
        raise GridFormatError(f"{path}: reserved header bytes must be zero")
    expected = _HEADER.size + 8 * nz * nx
    if len(raw) != expected:
        raise GridFormatError(f"{path}: size {len(raw)} bytes, expected {expected} for {nz}x{nx}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return data.reshape(nz, nx).astype(np.float64)
