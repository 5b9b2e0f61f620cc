"""Dense-grid value types and region-statistics kernels.

Layout convention: every grid is a float64 (or int32, for region maps) numpy
array in row-major, channel-interleaved order, i.e. shape ``(height, width,
channels)``.  Region maps are ``(height, width)``.

All containers copy their input and mark it read-only, so they can be shared
between threads freely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMPLEX_TOL = 1e-9


class GridError(ValueError):
    """Raised for malformed grids, mismatched shapes or invalid region maps."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise GridError(f"image must be (H, W, C) with positive sizes, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("image contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class SoftmaxField:
    """Per-pixel probability vectors, shape ``(H, W, M)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise GridError(f"softmax field must be (H, W, M), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("softmax field contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise GridError("softmax values must lie in [0, 1]")
        if np.max(np.abs(v.sum(axis=2) - 1.0)) > SIMPLEX_TOL:
            raise GridError("softmax vectors must sum to 1")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class RegionMap:
    """Integer region id per pixel; ids are exactly ``0..region_count-1``."""

    ids: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.ids)
        if a.ndim != 2 or min(a.shape) < 1:
            raise GridError(f"region map must be (H, W), got {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.mod(a, 1) == 0):
                raise GridError("region ids must be integers")
        a = a.astype(np.int32)
        if a.min() < 0:
            raise GridError("region ids must be non-negative")
        counts = np.bincount(a.ravel())
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0)
            raise GridError(f"region ids must be contiguous; empty ids {missing.tolist()}")
        object.__setattr__(self, "ids", _frozen(a))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def region_count(self) -> int:
        return int(self.ids.max()) + 1

    def __eq__(self, other):
        if not isinstance(other, RegionMap):
            return NotImplemented
        return self.ids.shape == other.ids.shape and bool(np.array_equal(self.ids, other.ids))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RegionStats:
    sizes: np.ndarray
    means: np.ndarray


def as_field(s) -> np.ndarray:
    """Return the ``(H, W, M)`` float64 array behind ``s`` (no simplex check for raw arrays)."""
    if isinstance(s, SoftmaxField):
        return s.values
    v = np.asarray(s, dtype=np.float64)
    if v.ndim != 3:
        raise GridError(f"expected (H, W, M) array, got shape {v.shape}")
    return v


def as_regions(r) -> RegionMap:
    return r if isinstance(r, RegionMap) else RegionMap(r)


def normalize_regions(labels) -> RegionMap:
    """Remap an arbitrary integer label image onto contiguous ids ``0..N-1``.

    Ids are assigned in order of first appearance in raster order, so two label
    images describing the same partition normalize to the same map.
    """
    a = np.asarray(labels)
    if a.ndim != 2:
        raise GridError(f"label image must be 2-D, got {a.shape}")
    _, first, inverse = np.unique(a.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return RegionMap(rank[inverse.ravel()].reshape(a.shape))


def canonical_order(r: RegionMap) -> np.ndarray:
    """Region ids sorted by first pixel occurrence (raster order).

    The result depends only on the partition, not on the id values, so
    reductions performed in this order are bit-identical under relabelling.
    Runs in O(P).
    """
    flat = r.ids.ravel()
    first = np.full(r.region_count, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size, dtype=np.int64))
    return np.argsort(first, kind="stable")


def _check_shapes(v: np.ndarray, r: RegionMap) -> None:
    if v.shape[:2] != r.ids.shape:
        raise GridError(f"field {v.shape[:2]} and region map {r.ids.shape} dimensions differ")


def compute_region_stats(s, r) -> RegionStats:
    """Pixel counts and channel-wise mean descriptor of every region.

    One ``bincount`` sweep per channel; the accumulation order within each
    region is the raster order of its pixels, which makes the result
    bit-reproducible.
    """
    v = as_field(s)
    r = as_regions(r)
    _check_shapes(v, r)
    n = r.region_count
    flat = r.ids.ravel()
    sizes = np.bincount(flat, minlength=n)
    if np.any(sizes == 0):
        raise GridError("region map has an empty id")
    pix = v.reshape(-1, v.shape[2])
    sums = np.stack([np.bincount(flat, weights=pix[:, m], minlength=n) for m in range(pix.shape[1])], axis=1)
    return RegionStats(sizes=_frozen(sizes), means=_frozen(sums / sizes[:, None]))


def permute_region_ids(r, perm) -> RegionMap:
    """Relabel pixels: a pixel with id ``k`` gets id ``perm[k]``."""
    r = as_regions(r)
    p = np.asarray(perm)
    n = r.region_count
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise GridError(f"perm must be a bijection on 0..{n - 1}")
    return RegionMap(p[r.ids])
