import itertools
import math

import numpy as np
import pytest

from casseg.metrics import (
    CSV_COLUMNS,
    MetricsReport,
    binarize,
    boundary_f,
    boundary_pixels,
    evaluate_partition,
    evaluate_saliency,
    f_beta,
    gt_covering,
    mae,
    rand_index,
    select_salient_channel,
    variation_of_information,
)
from casseg.regions import GridError


def oracle_f_beta(b, g, beta_sq=0.3):
    tp = sum(1 for x, y in zip(b.ravel(), g.ravel()) if x and y)
    npred = sum(1 for x in b.ravel() if x)
    ngt = sum(1 for y in g.ravel() if y)
    p = tp / npred if npred else 0.0
    r = tp / ngt if ngt else 0.0
    return (1 + beta_sq) * p * r / (beta_sq * p + r) if beta_sq * p + r > 0 else 0.0


def oracle_rand(a, b):
    a, b = a.ravel().tolist(), b.ravel().tolist()
    agree = total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        total += 1
        agree += (a[i] == a[j]) == (b[i] == b[j])
    return agree / total


def oracle_vi(a, b):
    a, b = a.ravel().tolist(), b.ravel().tolist()
    n = len(a)
    joint, ca, cb = {}, {}, {}
    for x, y in zip(a, b):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        ca[x] = ca.get(x, 0) + 1
        cb[y] = cb.get(y, 0) + 1
    vi = 0.0
    for (x, y), c in joint.items():
        p = c / n
        vi -= p * (math.log(p / (ca[x] / n)) + math.log(p / (cb[y] / n)))
    return vi


def oracle_covering(pred, gt):
    total = 0.0
    for g in np.unique(gt):
        gm = gt == g
        best = 0.0
        for p in np.unique(pred):
            pm = pred == p
            best = max(best, np.sum(gm & pm) / np.sum(gm | pm))
        total += gm.sum() * best
    return total / gt.size


def test_f_beta_and_mae_oracles(rng):
    for _ in range(20):
        s = rng.uniform(size=(16, 16))
        g = (rng.uniform(size=(16, 16)) < 0.3).astype(int)
        b = binarize(s)
        assert abs(f_beta(b, g) - oracle_f_beta(b, g)) <= 1e-12
        assert abs(mae(s, g) - sum(abs(x - y) for x, y in zip(s.ravel(), g.ravel())) / 256) <= 1e-12


def test_partition_oracles(rng):
    for _ in range(5):
        a = rng.integers(0, 4, (16, 16))
        b = rng.integers(0, 3, (16, 16))
        assert abs(rand_index(a, b) - oracle_rand(a, b)) <= 1e-12
        assert abs(variation_of_information(a, b) - oracle_vi(a, b)) <= 1e-12
        assert abs(gt_covering(a, b) - oracle_covering(a, b)) <= 1e-12


def test_identical_partitions():
    a = np.array([[0, 0, 1], [2, 2, 1]])
    assert rand_index(a, a) == 1.0
    assert variation_of_information(a, a) == 0.0
    assert gt_covering(a, a) == 1.0
    assert boundary_f(a, a) == 1.0
    # relabelling does not matter
    assert rand_index(a, 5 - a) == 1.0


def test_binarize_threshold():
    s = np.array([[0.1, 0.1, 0.1, 0.9]])  # mean 0.3, threshold 0.6
    assert binarize(s).tolist() == [[0, 0, 0, 1]]
    # all ones: threshold clamps below 1 so everything is foreground
    assert binarize(np.ones((2, 2))).sum() == 4
    assert binarize(np.zeros((2, 2))).sum() == 0


def test_f_beta_edge_cases():
    g = np.array([[1, 0], [0, 0]])
    assert f_beta(np.zeros((2, 2), int), g) == 0.0
    assert f_beta(g, g) == 1.0
    with pytest.raises(GridError):
        f_beta(np.array([[2, 0]]), np.array([[1, 0]]))
    with pytest.raises(GridError):
        mae(np.zeros((2, 2)), np.zeros((2, 3), int))


def test_boundary_pixels_and_f():
    a = np.array([[0, 0, 1, 1]] * 3)
    assert boundary_pixels(a).sum() == 6
    assert boundary_f(np.zeros((3, 4), int), a) == 0.0
    assert boundary_f(np.zeros((3, 4), int), np.zeros((3, 4), int)) == 1.0
    shifted = np.array([[0, 0, 0, 1]] * 3)
    assert boundary_f(shifted, a, tol=2.0) == 1.0
    assert boundary_f(shifted, a, tol=0.0) == pytest.approx(0.5)


def test_select_salient_channel():
    g = np.array([[0, 1], [1, 0]])
    s = np.stack([1.0 - g * 0.8, g * 0.8], axis=2)
    s = s / s.sum(axis=2, keepdims=True)
    assert select_salient_channel([s], [g]) == 1
    assert select_salient_channel([s[..., ::-1]], [g]) == 0
    flat = np.full((2, 2, 2), 0.5)
    assert select_salient_channel([flat], [g]) == 0


def test_ranges_under_fuzz(rng):
    for _ in range(200):
        h, w = rng.integers(1, 12, 2)
        s = rng.uniform(size=(h, w)) ** float(rng.uniform(0.2, 5))
        g = (rng.uniform(size=(h, w)) < rng.uniform()).astype(int)
        rep = evaluate_saliency(s, g)
        rep.check_ranges()
        a = rng.integers(0, int(rng.integers(1, 6)), (h, w))
        b = rng.integers(0, int(rng.integers(1, 6)), (h, w))
        rep = evaluate_partition(a, b)
        rep.check_ranges()
        assert rep.variation_of_information <= 2 * math.log(h * w) + 1e-12


def test_report_serialisation():
    r = MetricsReport(f_beta=0.5, mae=0.25)
    assert list(r.to_dict()) == list(CSV_COLUMNS)
    assert r.csv_row()[0] == "0.5"
    m = MetricsReport.mean([r, MetricsReport(f_beta=1.0)])
    assert m.f_beta == 0.75 and m.mae == 0.125
    with pytest.raises(ValueError):
        MetricsReport(f_beta=1.5).check_ranges()
