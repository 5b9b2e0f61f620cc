"""Class-agnostic segmentation (CAS) loss and cross-entropy baselines.

Every loss here is written against the softmax output ``s`` of shape
``(H, W, M)``; the ``*_backward`` functions return ``dLoss/ds`` with the same
shape.  Chaining that into a network's own backward pass is the caller's job.

CAS loss::

    CAS = sum_i alpha/|r_i| * sum_{x in r_i} ||s(x) - mean_i||^2
          - (1 - alpha) * sum_{i != j} ||mean_i - mean_j||^2

The pair sum runs over *ordered* pairs, so each unordered pair counts twice.
Region reductions are carried out in first-occurrence order of the regions,
which keeps the value and gradient bit-identical under any relabelling of the
region ids.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .regions import GridError, as_field, as_regions, canonical_order, compute_region_stats

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class CasConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class LossBounds:
    lower: float
    upper: float

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _alpha(cfg) -> float:
    if isinstance(cfg, CasConfig):
        return cfg.alpha
    return CasConfig(float(cfg)).alpha


def _prepare(s, r):
    v = as_field(s)
    r = as_regions(r)
    if v.shape[:2] != r.ids.shape:
        raise GridError(f"field {v.shape[:2]} and region map {r.ids.shape} dimensions differ")
    stats = compute_region_stats(v, r)
    order = canonical_order(r)
    return v, r, stats, order


def cas_terms(s, r) -> tuple[float, float]:
    """Unweighted ``(uniformer, discriminator)`` sums of the CAS loss."""
    v, r, stats, order = _prepare(s, r)
    resid = v - stats.means[r.ids]
    sq = np.einsum("hwm,hwm->hw", resid, resid)
    per_region = np.bincount(r.ids.ravel(), weights=sq.ravel(), minlength=r.region_count)
    uniformer = 0.0
    for k in order:
        uniformer += per_region[k] / stats.sizes[k]
    mc = stats.means[order]
    diff = mc[:, None, :] - mc[None, :, :]
    d2 = np.einsum("ijm,ijm->ij", diff, diff)
    discriminator = 0.0
    n = len(order)
    for i in range(n):
        for j in range(n):
            if i != j:
                discriminator += d2[i, j]
    return float(uniformer), float(discriminator)


def cas_forward(s, r, cfg=CasConfig()) -> float:
    alpha = _alpha(cfg)
    uniformer, discriminator = cas_terms(s, r)
    return alpha * uniformer - (1.0 - alpha) * discriminator


def cas_backward(s, r, cfg=CasConfig()) -> np.ndarray:
    """Gradient of :func:`cas_forward` with respect to every entry of ``s``.

    For a pixel y in region k::

        dCAS/ds(y) = 2 alpha/|r_k| (s(y) - mean_k)
                     - 4 (1 - alpha)/|r_k| sum_{j != k} (mean_k - mean_j)

    The uniformer's indirect term through ``mean_k`` vanishes because the
    residuals of a region sum to zero.
    """
    alpha = _alpha(cfg)
    v, r, stats, order = _prepare(s, r)
    mc = stats.means[order]
    pair_c = (mc[:, None, :] - mc[None, :, :]).sum(axis=1)
    pair = np.empty_like(pair_c)
    pair[order] = pair_c
    size = stats.sizes.astype(np.float64)[:, None]
    region_coef = (4.0 * (1.0 - alpha)) * pair / size
    ids = r.ids
    return (2.0 * alpha) * (v - stats.means[ids]) / size[ids] - region_coef[ids]


def cas_bounds(region_count: int, cfg=CasConfig(), channels: int = 2) -> LossBounds:
    """Tight interval containing every CAS value for N regions and M channels.

    Each uniformer term is the variance of a distribution on the simplex, at
    most ``1 - 1/M``; each ordered pair distance is at most the squared
    simplex diameter, 2.
    """
    if region_count < 1:
        raise ValueError("region_count must be >= 1")
    if channels < 2:
        raise ValueError("channels must be >= 2")
    alpha = _alpha(cfg)
    n = region_count
    return LossBounds(lower=-2.0 * (1.0 - alpha) * n * (n - 1), upper=alpha * n * (1.0 - 1.0 / channels))


def _labels(labels, channels: int) -> np.ndarray:
    lab = labels.ids if hasattr(labels, "ids") else np.asarray(labels)
    if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
        raise GridError("labels must be a 2-D integer array")
    if lab.min() < 0 or lab.max() >= channels:
        raise GridError(f"label ids must lie in [0, {channels})")
    return lab


def _picked(s, labels):
    v = as_field(s)
    lab = _labels(labels, v.shape[2])
    if lab.shape != v.shape[:2]:
        raise GridError(f"field {v.shape[:2]} and labels {lab.shape} dimensions differ")
    p = np.take_along_axis(v, lab[:, :, None], axis=2)[:, :, 0]
    return v, lab, p


def ce_forward(s, labels) -> float:
    """Mean pixelwise negative log-likelihood; probabilities floored at 1e-12."""
    _, _, p = _picked(s, labels)
    return float(-np.mean(np.log(np.maximum(p, LOG_FLOOR))))


def ce_backward(s, labels) -> np.ndarray:
    """Derivative of :func:`ce_forward`.

    Entries where the picked probability sits below the log floor get zero
    gradient, matching the flat clamped objective there.
    """
    v, lab, p = _picked(s, labels)
    grad = np.zeros_like(v)
    g = np.where(p >= LOG_FLOOR, -1.0 / (p.size * np.where(p >= LOG_FLOOR, p, 1.0)), 0.0)
    np.put_along_axis(grad, lab[:, :, None], g[:, :, None], axis=2)
    return grad


def _binary(s, labels):
    v = as_field(s)
    if v.shape[2] != 2:
        raise GridError(f"class-agnostic CE needs M = 2 channels, got {v.shape[2]}")
    lab = labels.ids if hasattr(labels, "ids") else np.asarray(labels)
    if not np.all((lab == 0) | (lab == 1)):
        raise GridError("class-agnostic CE needs binary labels")
    return v, lab.astype(np.int64)


def cace_forward(s, labels) -> tuple[float, int]:
    """Class-agnostic CE: ``min(ce(s, y), ce(s, 1 - y))``.

    Returns ``(loss, assignment)`` where assignment 0 means the labels as given
    won and 1 means the flipped labels won.  Ties go to 0.
    """
    v, lab = _binary(s, labels)
    direct = ce_forward(v, lab)
    flipped = ce_forward(v, 1 - lab)
    if flipped < direct:
        return flipped, 1
    return direct, 0


def cace_backward(s, labels) -> np.ndarray:
    """Gradient of the winning branch of :func:`cace_forward`."""
    v, lab = _binary(s, labels)
    _, assignment = cace_forward(v, lab)
    return ce_backward(v, lab if assignment == 0 else 1 - lab)
