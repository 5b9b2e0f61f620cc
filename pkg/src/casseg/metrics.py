"""Saliency and partition-comparison metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .regions import GridError, as_field

THRESHOLD_CEILING = 1.0 - 1e-12


def _map2d(a, name):
    a = np.asarray(getattr(a, "ids", a))
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2 or a.size == 0:
        raise GridError(f"{name} must be a non-empty 2-D map, got shape {a.shape}")
    return a


def _same_shape(a, b):
    if a.shape != b.shape:
        raise GridError(f"dimension mismatch: {a.shape} vs {b.shape}")


def _binary(a, name):
    a = _map2d(a, name)
    if not np.all((a == 0) | (a == 1)):
        raise GridError(f"{name} must be binary")
    return a.astype(bool)


def binarize(s_map) -> np.ndarray:
    """Adaptive threshold: 1 where ``S > min(2 * mean(S), 1 - 1e-12)``."""
    s = _map2d(s_map, "saliency map").astype(np.float64)
    t = min(2.0 * float(s.mean()), THRESHOLD_CEILING)
    return (s > t).astype(np.uint8)


def precision_recall(b, g) -> tuple[float, float]:
    b = _binary(b, "prediction")
    g = _binary(g, "ground truth")
    _same_shape(b, g)
    tp = int(np.count_nonzero(b & g))
    npred = int(np.count_nonzero(b))
    ngt = int(np.count_nonzero(g))
    return (tp / npred if npred else 0.0), (tp / ngt if ngt else 0.0)


def f_beta(b, g, beta_sq: float = 0.3) -> float:
    p, r = precision_recall(b, g)
    denom = beta_sq * p + r
    return (1.0 + beta_sq) * p * r / denom if denom > 0 else 0.0


def mae(s_map, g) -> float:
    s = _map2d(s_map, "saliency map").astype(np.float64)
    g = _binary(g, "ground truth")
    _same_shape(s, g)
    return float(np.mean(np.abs(s - g)))


def select_salient_channel(outputs, gts) -> int:
    """Channel whose values correlate best (Pearson, pooled) with the ground truths.

    A channel with zero variance scores -inf; ties go to the lower index.
    """
    outputs = list(outputs)
    gts = list(gts)
    if not outputs or len(outputs) != len(gts):
        raise ValueError("need matching, non-empty lists of outputs and ground truths")
    vals = []
    for s, g in zip(outputs, gts):
        v = as_field(s)
        gg = _binary(g, "ground truth")
        _same_shape(v[:, :, 0], gg)
        vals.append(v.reshape(-1, v.shape[2]))
    x = np.concatenate(vals)
    y = np.concatenate([_binary(g, "ground truth").ravel() for g in gts]).astype(np.float64)
    if x.shape[1] < 2:
        raise GridError("channel selection needs at least 2 channels")
    yc = y - y.mean()
    ny = math.sqrt(float(yc @ yc))
    best, best_score = 0, -math.inf
    for m in range(x.shape[1]):
        xc = x[:, m] - x[:, m].mean()
        nx = math.sqrt(float(xc @ xc))
        score = float(xc @ yc) / (nx * ny) if nx > 0 and ny > 0 else -math.inf
        if score > best_score:
            best, best_score = m, score
    return best


def contingency(a, b) -> np.ndarray:
    """Joint pixel counts ``n[i, j] = |{x : a(x) = i, b(x) = j}|`` over the ids present."""
    a = _map2d(a, "first partition")
    b = _map2d(b, "second partition")
    _same_shape(a, b)
    _, ai = np.unique(a.ravel(), return_inverse=True)
    _, bi = np.unique(b.ravel(), return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    return np.bincount(ai.ravel() * nb + bi.ravel(), minlength=na * nb).reshape(na, nb)


def _pairs(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1) / 2.0


def rand_index(a, b) -> float:
    """Fraction of unordered pixel pairs on which the two partitions agree."""
    n = contingency(a, b)
    total = n.sum()
    if total < 2:
        return 1.0
    all_pairs = total * (total - 1) / 2.0
    same_both = _pairs(n).sum()
    same_a = _pairs(n.sum(axis=1)).sum()
    same_b = _pairs(n.sum(axis=0)).sum()
    disagree = same_a + same_b - 2.0 * same_both
    return float((all_pairs - disagree) / all_pairs)


def variation_of_information(a, b) -> float:
    """``H(A|B) + H(B|A)`` in nats."""
    n = contingency(a, b).astype(np.float64)
    p = n / n.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    h_ab = -np.sum(p[nz] * np.log(p[nz]))
    h_a = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    h_b = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    return float(max(2.0 * h_ab - h_a - h_b, 0.0))


def gt_covering(pred, gt) -> float:
    """Size-weighted best IoU of every ground-truth region against the prediction."""
    n = contingency(gt, pred).astype(np.float64)
    size_g = n.sum(axis=1)
    size_p = n.sum(axis=0)
    iou = n / (size_g[:, None] + size_p[None, :] - n)
    return float(np.sum(size_g * iou.max(axis=1)) / n.sum())


def boundary_pixels(r) -> np.ndarray:
    """Mask of pixels with at least one 4-neighbour in a different region."""
    a = _map2d(r, "partition")
    edge = np.zeros(a.shape, dtype=bool)
    dv = a[1:, :] != a[:-1, :]
    dh = a[:, 1:] != a[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def match_boundaries(pred_edge, gt_edge, tol: float = 2.0) -> int:
    """Greedy one-to-one matching of boundary pixels within Euclidean ``tol``.

    Candidate pairs are accepted in increasing distance (ties in raster order
    of the predicted, then ground-truth pixel); this gives a lower bound on
    the optimal bipartite match count.
    """
    p = np.argwhere(pred_edge)
    g = np.argwhere(gt_edge)
    if len(p) == 0 or len(g) == 0:
        return 0
    shape = gt_edge.shape
    gidx = -np.ones(shape, dtype=np.int64)
    gidx[g[:, 0], g[:, 1]] = np.arange(len(g))
    rad = int(math.floor(tol))
    offsets = [(dy, dx) for dy in range(-rad, rad + 1) for dx in range(-rad, rad + 1) if dy * dy + dx * dx <= tol * tol]
    cand_d, cand_p, cand_g = [], [], []
    for dy, dx in offsets:
        y = p[:, 0] + dy
        x = p[:, 1] + dx
        ok = (y >= 0) & (y < shape[0]) & (x >= 0) & (x < shape[1])
        pi = np.flatnonzero(ok)
        gi = gidx[y[ok], x[ok]]
        hit = gi >= 0
        cand_p.append(pi[hit])
        cand_g.append(gi[hit])
        cand_d.append(np.full(int(hit.sum()), dy * dy + dx * dx))
    d = np.concatenate(cand_d)
    pi = np.concatenate(cand_p)
    gi = np.concatenate(cand_g)
    order = np.lexsort((gi, pi, d))
    used_p = np.zeros(len(p), dtype=bool)
    used_g = np.zeros(len(g), dtype=bool)
    matched = 0
    for k in order:
        a, b = pi[k], gi[k]
        if not used_p[a] and not used_g[b]:
            used_p[a] = used_g[b] = True
            matched += 1
    return matched


def boundary_f(pred, gt, tol: float = 2.0) -> float:
    pred = _map2d(pred, "prediction")
    gt = _map2d(gt, "ground truth")
    _same_shape(pred, gt)
    pe = boundary_pixels(pred)
    ge = boundary_pixels(gt)
    npred, ngt = int(pe.sum()), int(ge.sum())
    if npred == 0 and ngt == 0:
        return 1.0
    if npred == 0 or ngt == 0:
        return 0.0
    m = match_boundaries(pe, ge, tol)
    prec, rec = m / npred, m / ngt
    return 2.0 * prec * rec / (prec + rec) if m else 0.0


@dataclass
class MetricsReport:
    """One evaluation result; ``CSV_COLUMNS`` is the stable column order."""

    f_beta: float = 0.0
    mae: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    rand_index: float = 0.0
    variation_of_information: float = 0.0
    gt_covering: float = 0.0
    boundary_f: float = 0.0

    def check_ranges(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name}={v} out of range")
            if f.name != "variation_of_information" and v > 1 + 1e-12:
                raise ValueError(f"{f.name}={v} out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def csv_row(self) -> list[str]:
        return [repr(float(getattr(self, c))) for c in CSV_COLUMNS]

    @classmethod
    def mean(cls, reports) -> "MetricsReport":
        reports = list(reports)
        if not reports:
            raise ValueError("no reports to average")
        return cls(**{c: float(np.mean([getattr(r, c) for r in reports])) for c in CSV_COLUMNS})


CSV_COLUMNS = tuple(f.name for f in fields(MetricsReport))


def evaluate_saliency(s_map, gt) -> MetricsReport:
    """All metrics for one saliency map against one binary ground truth.

    The partition metrics compare the binarized map with the ground-truth
    mask, both read as two-region partitions.
    """
    g = _binary(gt, "ground truth").astype(np.int32)
    b = binarize(s_map).astype(np.int32)
    p, r = precision_recall(b, g)
    return MetricsReport(
        f_beta=f_beta(b, g),
        mae=mae(s_map, g),
        precision=p,
        recall=r,
        rand_index=rand_index(b, g),
        variation_of_information=variation_of_information(b, g),
        gt_covering=gt_covering(b, g),
        boundary_f=boundary_f(b, g),
    )


def evaluate_partition(pred, gt) -> MetricsReport:
    """Region and contour metrics for a multi-region prediction; saliency fields stay 0."""
    return MetricsReport(
        rand_index=rand_index(pred, gt),
        variation_of_information=variation_of_information(pred, gt),
        gt_covering=gt_covering(pred, gt),
        boundary_f=boundary_f(pred, gt),
    )
