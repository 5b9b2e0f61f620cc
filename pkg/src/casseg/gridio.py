"""Flat binary grid format.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"CASG"
    4       4     u32 height
    8       4     u32 width
    12      4     u32 channels
    16      1     u8 dtype tag (1 = float64, 2 = int32)
    17      ...   row-major, channel-interleaved values

Region maps are written with ``channels = 1`` and the int32 tag.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .regions import GridError, ImageGrid, RegionMap, SoftmaxField

MAGIC = b"CASG"
_HEADER = struct.Struct("<4sIIIB")
DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<i4")}
_TAG_OF = {np.dtype("<f8"): 1, np.dtype("<i4"): 2}


def encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise GridError(f"only 2-D/3-D grids serialize, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype("<i4")
    else:
        a = a.astype("<f8")
    h, w, c = a.shape
    return _HEADER.pack(MAGIC, h, w, c, _TAG_OF[a.dtype]) + np.ascontiguousarray(a).tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    """Inverse of :func:`encode_array`; always returns a 3-D array."""
    if len(buf) < _HEADER.size:
        raise GridError("truncated grid header")
    magic, h, w, c, tag = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise GridError(f"bad magic {magic!r}")
    if tag not in DTYPE_TAGS:
        raise GridError(f"unknown dtype tag {tag}")
    dt = DTYPE_TAGS[tag]
    expected = _HEADER.size + h * w * c * dt.itemsize
    if len(buf) != expected:
        raise GridError(f"grid payload is {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(h, w, c).astype(dt.newbyteorder("="))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_grid(path, grid) -> None:
    if isinstance(grid, RegionMap):
        a = grid.ids
    elif isinstance(grid, (ImageGrid, SoftmaxField)):
        a = grid.values
    else:
        a = np.asarray(grid)
    atomic_write_bytes(path, encode_array(a))


def load_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def load_image(path) -> ImageGrid:
    return ImageGrid(load_array(path))


def load_regions(path) -> RegionMap:
    a = load_array(path)
    if a.shape[2] != 1 or not np.issubdtype(a.dtype, np.integer):
        raise GridError("file does not hold a region map")
    return RegionMap(a[:, :, 0])
