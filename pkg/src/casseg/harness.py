"""Training loop, experiment presets and result export.

Every experiment is a pure function of ``(ExperimentConfig, seed)``; result
files (``metrics.csv``, ``report.json``, ``trainlog.csv``) are written with
``repr`` floats and sorted keys so reruns are byte-identical.  Wall-clock
times only ever go to ``meta.json``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses, metrics, nnet, synth
from .gridio import atomic_write_bytes
from .regions import RegionMap, compute_region_stats

log = logging.getLogger(__name__)

LOSS_KINDS = ("cas", "ce", "cace")
EXPERIMENT_KINDS = ("shapes", "toy")
FIDELITY_FRACTIONS = (0.02, 0.05, 0.10, 0.30, 0.50)
ALPHAS = (0.01, 0.1, 0.3, 0.5, 0.9)
SPARSITY_PROB = 0.95
SPARSITY_FRACTION = 0.90
MEAN_DISTANCE_MIN = 1.8


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class BoundViolation(AssertionError):
    pass


@dataclass
class DataConfig:
    count: int = 50  # shapes: training pool incl. validation split
    test_count: int = 40
    size: int = 32
    regions_per_image: int = 2
    noise: float = 0.1
    val_fraction: float = 0.2
    n1: int = 10000  # toy
    n2: int = 10
    var: float = 0.2


@dataclass
class ExperimentConfig:
    experiment: str = "shapes"
    loss: str = "cas"
    alpha: float = 0.1
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    flip_fraction: float = 0.0
    hidden: int = 8
    channels: int = 2
    early_stop_window: int = 50
    early_stop_tol: float = 1e-5
    input_scale: float = 255.0
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "cace" and self.channels != 2:
            raise ValueError("cace needs exactly 2 output channels")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ValueError("flip_fraction must lie in [0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings to a nested dict; values parse as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"override {item!r}: {p!r} is not a section")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"override {item!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return d


def network_spec(cfg: ExperimentConfig):
    h = cfg.hidden
    if cfg.experiment == "toy":
        return (nnet.dense(2, h), nnet.RELU, nnet.dense(h, cfg.channels), nnet.SOFTMAX)
    return (nnet.conv3x3(3, h), nnet.RELU, nnet.conv3x3(h, h), nnet.RELU, nnet.dense(h, cfg.channels), nnet.SOFTMAX)


# ---------------------------------------------------------------- data


@dataclass
class Batch:
    """Network input plus per-image targets."""

    x: np.ndarray
    regions: list
    labels: list


@dataclass
class ShapeData:
    train: list
    val: list
    test: list


def prepare_shapes(cfg: ExperimentConfig) -> ShapeData:
    """Train/validation/test splits; only the training split gets label flips.

    The validation split (used for output-channel selection) is held out
    before corruption, so it always carries clean labels.
    """
    dc = cfg.data
    pool = synth.gen_shapes(dc.count, dc.size, dc.regions_per_image, cfg.seed, dc.noise)
    n_val = int(math.floor(dc.val_fraction * dc.count + 0.5))
    val, train = pool[:n_val], pool[n_val:]
    train = synth.flip_labels(train, cfg.flip_fraction, cfg.seed)
    test = synth.gen_shapes(dc.test_count, dc.size, dc.regions_per_image, cfg.seed + 1_000_003, dc.noise)
    return ShapeData(train, val, test)


def shapes_input(samples, scale) -> np.ndarray:
    return np.stack([synth.standardize(s.image, scale).values for s in samples])


def toy_batch(points: synth.ToySet) -> Batch:
    """The whole toy set as one 1 x P "image" whose two regions are the classes."""
    labels = points.class_id[None, :].astype(np.int32)
    return Batch(points.points[None, None], [RegionMap(labels)], [labels])


def shape_batch(samples, scale) -> Batch:
    return Batch(shapes_input(samples, scale), [s.regions for s in samples], [s.label_map() for s in samples])


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    wall_time: float = 0.0
    stopped_early: bool = False
    params_path: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(self.losses):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()


def batch_loss(kind, out, batch: Batch, cfg: ExperimentConfig, check_bounds=True):
    """Mean per-image loss over the batch and its gradient w.r.t. the softmax output."""
    b = out.shape[0]
    total = 0.0
    grad = np.empty_like(out)
    for i in range(b):
        s, r, lab = out[i], batch.regions[i], batch.labels[i]
        if kind == "cas":
            v = losses.cas_forward(s, r, cfg.alpha)
            if check_bounds:
                bounds = losses.cas_bounds(r.region_count, cfg.alpha, s.shape[2])
                if not bounds.contains(v):
                    raise BoundViolation(f"CAS value {v} outside [{bounds.lower}, {bounds.upper}]")
            g = losses.cas_backward(s, r, cfg.alpha)
        elif kind == "ce":
            v = losses.ce_forward(s, lab)
            g = losses.ce_backward(s, lab)
        else:
            v, _ = losses.cace_forward(s, lab)
            g = losses.cace_backward(s, lab)
        total += v
        grad[i] = g / b
    return total / b, grad


def _batches(cfg: ExperimentConfig, samples):
    """Endless deterministic stream of shuffled mini-batches."""
    n = len(samples)
    epoch = 0
    while True:
        order = synth.make_rng(cfg.seed, 5150, epoch).permutation(n)
        bs = min(cfg.batch_size, n)
        for start in range(0, n - bs + 1, bs):
            yield [samples[i] for i in order[start:start + bs]]
        epoch += 1


def train(cfg: ExperimentConfig, data=None):
    """Train a fresh network; returns ``(ModelParams, TrainLog)``.

    ``data`` is a :class:`ShapeData` or a ``ToySet`` (toy experiments); when
    omitted it is generated from ``cfg``.  Stops after ``cfg.steps`` steps or
    when the mean loss of the last window improved by less than
    ``early_stop_tol`` over the window before it.
    """
    spec = network_spec(cfg)
    params = nnet.init_params(spec, cfg.seed)
    state = nnet.adam_init(params, lr=cfg.lr)
    trainlog = TrainLog()
    if data is None:
        data = synth.gen_toy_gaussians(cfg.data.n1, cfg.data.n2, cfg.data.var, cfg.seed)[0] if cfg.experiment == "toy" else prepare_shapes(cfg)
    t0 = time.perf_counter()
    if cfg.experiment == "toy":
        full = toy_batch(data)
        stream = iter(lambda: full, None)
    else:
        inputs = {id(smp): synth.standardize(smp.image, cfg.input_scale).values for smp in data.train}

        def as_batch(group):
            return Batch(np.stack([inputs[id(smp)] for smp in group]), [smp.regions for smp in group],
                         [smp.label_map() for smp in group])

        stream = (as_batch(g) for g in _batches(cfg, data.train))
    w = cfg.early_stop_window
    for step in range(cfg.steps):
        batch = next(stream)
        out, c = nnet.forward(params, spec, batch.x)
        value, grad = batch_loss(cfg.loss, out, batch, cfg)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        trainlog.losses.append(value)
        params, state = nnet.adam_step(params, nnet.backward(params, spec, c, grad), state)
        done = step + 1
        if w > 0 and done % w == 0 and done >= 2 * w:
            prev = float(np.mean(trainlog.losses[done - 2 * w:done - w]))
            last = float(np.mean(trainlog.losses[done - w:done]))
            if prev - last < cfg.early_stop_tol:
                trainlog.stopped_early = True
                break
    trainlog.wall_time = time.perf_counter() - t0
    if cfg.out_dir:
        out_dir = Path(cfg.out_dir)
        nnet.save_checkpoint(out_dir / "checkpoint", params, spec, state.step)
        atomic_write_bytes(out_dir / "trainlog.csv", trainlog.to_csv().encode())
        write_meta(out_dir, {"wall_time": trainlog.wall_time})
        trainlog.params_path = str(out_dir / "checkpoint")
    return params, trainlog


# ---------------------------------------------------------------- evaluation


def predict(params, spec, samples, scale) -> np.ndarray:
    out, _ = nnet.forward(params, spec, shapes_input(samples, scale))
    return out


def choose_channel(cfg: ExperimentConfig, params, spec, val) -> int:
    """Saliency channel: fixed for CE, correlation-selected on validation data otherwise."""
    if cfg.loss == "ce":
        return 1
    out = predict(params, spec, val, cfg.input_scale)
    return metrics.select_salient_channel(list(out), [s.saliency_gt() for s in val])


def within_region_variance(out, samples) -> float:
    """Mean over images and regions of the per-region descriptor variance."""
    vals = []
    for s, smp in zip(out, samples):
        u, _ = losses.cas_terms(s, smp.regions)
        vals.append(u / smp.regions.region_count)
    return float(np.mean(vals))


def sparsity_fraction(out) -> float:
    return float(np.mean(out.max(axis=-1) >= SPARSITY_PROB))


def evaluate(cfg: ExperimentConfig, params, data: ShapeData) -> dict:
    spec = network_spec(cfg)
    ch = choose_channel(cfg, params, spec, data.val)
    out = predict(params, spec, data.test, cfg.input_scale)
    reports = [metrics.evaluate_saliency(o[:, :, ch], smp.saliency_gt()) for o, smp in zip(out, data.test)]
    report = metrics.MetricsReport.mean(reports)
    report.check_ranges()
    return {
        "channel": ch,
        "metrics": report,
        "within_region_variance": within_region_variance(out, data.test),
        "sparsity": sparsity_fraction(out),
    }


def toy_confusion(cfg: ExperimentConfig, params, train_set, test_set) -> list:
    """2x2 counts, rows = predicted class (1, 2), columns = true class (1, 2)."""
    spec = network_spec(cfg)
    if cfg.loss == "ce":
        ch = 1
    else:
        b = toy_batch(train_set)
        out, _ = nnet.forward(params, spec, b.x)
        ch = metrics.select_salient_channel([out[0]], [b.labels[0]])
    out, _ = nnet.forward(params, spec, test_set.points[None, None])
    pred = (out[0, 0].argmax(axis=-1) == ch).astype(np.int64)
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (pred, test_set.class_id), 1)
    return cm.tolist()


# ---------------------------------------------------------------- experiments


def toy_config(seed: int, loss: str, **kw) -> ExperimentConfig:
    base = dict(experiment="toy", loss=loss, seed=seed, hidden=10, steps=1000, early_stop_window=0)
    base.update(kw)
    return ExperimentConfig(**base)


def _toy_cell(args):
    cfg, = args
    train_set, test_set = synth.gen_toy_gaussians(cfg.data.n1, cfg.data.n2, cfg.data.var, cfg.seed)
    params, tl = train(cfg, train_set)
    return {"confusion": toy_confusion(cfg, params, train_set, test_set), "final_loss": tl.losses[-1] if tl.losses else None}


def run_cells(fn, cells, jobs: int = 1):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, cells))


def run_toy_imbalance(seed: int = 0, base: ExperimentConfig | None = None, jobs: int = 1) -> dict:
    """Train the 10-hidden-unit net with CE and with CAS on the imbalanced toy set.

    Returns confusion matrices in the layout rows = output, columns = label.
    """
    cfgs = []
    for loss in ("ce", "cas"):
        cfg = replace(base, loss=loss, seed=seed) if base else toy_config(seed, loss)
        cfgs.append((cfg,))
    res = run_cells(_toy_cell, cfgs, jobs)
    return {"ce": res[0], "cas": res[1], "config": cfgs[0][0].to_dict()}


def shapes_config(seed: int, loss: str, **kw) -> ExperimentConfig:
    return ExperimentConfig(experiment="shapes", loss=loss, seed=seed, **kw)


def _shape_cell(args):
    cfg, label = args
    data = prepare_shapes(cfg)
    params, tl = train(cfg, data)
    ev = evaluate(cfg, params, data)
    return {"cell": label, "loss": cfg.loss, "alpha": cfg.alpha, "flip_fraction": cfg.flip_fraction,
            "steps": len(tl.losses), "final_loss": tl.losses[-1] if tl.losses else float("nan"),
            "channel": ev["channel"], "within_region_variance": ev["within_region_variance"],
            "sparsity": ev["sparsity"], "metrics": ev["metrics"]}


def run_fidelity_sweep(fractions=FIDELITY_FRACTIONS, seed: int = 0, base: ExperimentConfig | None = None,
                       jobs: int = 1, loss_kinds=LOSS_KINDS) -> list:
    """Train each loss on label-flipped shapes, evaluate on clean test data.

    A clean (fraction 0) run is always included as the reference.
    """
    fr = sorted(set([0.0] + [float(f) for f in fractions]))
    cells = []
    for f in fr:
        for loss in loss_kinds:
            cfg = replace(base, loss=loss, seed=seed, flip_fraction=f) if base else shapes_config(seed, loss, flip_fraction=f)
            cells.append((cfg, f"{loss}@{f:g}"))
    return run_cells(_shape_cell, cells, jobs)


def run_alpha_ablation(alphas=ALPHAS, seed: int = 0, base: ExperimentConfig | None = None, jobs: int = 1) -> list:
    cells = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
        cfg = replace(base, loss="cas", seed=seed, alpha=float(a)) if base else shapes_config(seed, "cas", alpha=float(a))
        cells.append((cfg, f"alpha={a:g}"))
    return run_cells(_shape_cell, cells, jobs)


def discriminator_grid_search(step: float = 0.01):
    """Maximise ``||a - b||^2`` over pairs of 2-channel simplex points on a grid.

    Returns ``(max value, list of maximising (a, b) pairs)``.
    """
    n = int(round(1.0 / step))
    t = np.arange(n + 1) / n
    a = np.stack([t, 1.0 - t], axis=1)
    d = ((a[:, None, :] - a[None, :, :]) ** 2).sum(axis=-1)
    best = float(d.max())
    idx = np.argwhere(d == best)
    return best, [(a[i].tolist(), a[j].tolist()) for i, j in idx]


def kkt_residual(a0=1.0, a1=0.0, b0=0.0, b1=1.0, lam1=2.0, lam2=2.0, mu=(0.0, 4.0, 4.0, 0.0)) -> float:
    """Largest violation of the KKT system of the 2-channel discriminator maximisation.

    Uses the Lagrangian ``||a-b||^2 - l1(a0+a1-1) - l2(b0+b1-1) + sum mu_k * x_k``
    with multipliers listed for (a0, a1, b0, b1).
    """
    m1, m2, m3, m4 = mu
    eqs = [
        2 * (a0 - b0) - lam1 + m1,
        2 * (a1 - b1) - lam1 + m2,
        -2 * (a0 - b0) - lam2 + m3,
        -2 * (a1 - b1) - lam2 + m4,
        a0 + a1 - 1,
        b0 + b1 - 1,
        m1 * a0, m2 * a1, m3 * b0, m4 * b1,
    ]
    return float(max(abs(e) for e in eqs))


def gradient_check(seed: int, instances: int = 50, eps: float = 1e-6) -> dict:
    """Finite-difference checks of the CAS gradient and of losses chained through the net."""
    rng = synth.make_rng(seed, 31337)
    worst_loss = 0.0
    for _ in range(instances):
        h, w = rng.integers(2, 9, 2)
        m = int(rng.integers(2, 5))
        n = int(rng.integers(1, 5))
        s = nnet.softmax(rng.normal(size=(h, w, m)) * 2)
        r = random_regions(rng, h, w, n)
        alpha = float(rng.uniform(0, 1))
        num = np.zeros_like(s)
        for idx in np.ndindex(s.shape):
            sp = s.copy(); sp[idx] += eps
            sm = s.copy(); sm[idx] -= eps
            num[idx] = (losses.cas_forward(sp, r, alpha) - losses.cas_forward(sm, r, alpha)) / (2 * eps)
        worst_loss = max(worst_loss, nnet.relative_error(losses.cas_backward(s, r, alpha), num))
    worst_net = {}
    for kind in LOSS_KINDS:
        worst_net[kind] = network_gradient_error(kind, int(rng.integers(0, 2**31)), eps)
    return {"cas_softmax_max_rel_err": worst_loss, "network_max_rel_err": worst_net,
            "max_rel_err": max([worst_loss] + list(worst_net.values()))}


def random_regions(rng, h, w, n) -> RegionMap:
    """Random map with exactly ``min(n, h*w)`` non-empty regions."""
    n = min(n, h * w)
    ids = rng.integers(0, n, h * w)
    ids[rng.permutation(h * w)[:n]] = np.arange(n)
    return RegionMap(ids.reshape(h, w))


def network_gradient_error(kind: str, seed: int, eps: float = 1e-6) -> float:
    """Loss-through-network gradient check on a 4x4 input with a small conv net."""
    rng = synth.make_rng(seed, 2718)
    spec = (nnet.conv3x3(3, 3), nnet.RELU, nnet.dense(3, 2), nnet.SOFTMAX)
    params = nnet.init_params(spec, seed)
    for t in params.tensors:
        if "b" in t:
            t["b"][:] = rng.normal(scale=0.1, size=t["b"].shape)
    x = rng.normal(size=(1, 4, 4, 3))
    r = random_regions(rng, 4, 4, 2)
    lab = r.ids.copy()
    cfg = ExperimentConfig(loss=kind)
    batch = Batch(x, [r], [lab])

    def loss_of(p):
        out, _ = nnet.forward(p, spec, x)
        return batch_loss(kind, out, batch, cfg, check_bounds=False)[0]

    out, cache = nnet.forward(params, spec, x)
    _, g = batch_loss(kind, out, batch, cfg, check_bounds=False)
    analytic = nnet.backward(params, spec, cache, g)
    numeric = nnet.finite_difference_grad(loss_of, params, eps)
    return nnet.relative_error(analytic, numeric)


def permutation_check(seed: int, instances: int = 200) -> bool:
    rng = synth.make_rng(seed, 1618)
    from .regions import permute_region_ids
    for _ in range(instances):
        h, w = rng.integers(1, 9, 2)
        m = int(rng.integers(2, 5))
        s = nnet.softmax(rng.normal(size=(h, w, m)) * 2)
        r = random_regions(rng, h, w, int(rng.integers(1, 6)))
        alpha = float(rng.uniform(0, 1))
        rp = permute_region_ids(r, rng.permutation(r.region_count))
        if losses.cas_forward(s, r, alpha) != losses.cas_forward(s, rp, alpha):
            return False
        if not np.array_equal(losses.cas_backward(s, r, alpha), losses.cas_backward(s, rp, alpha)):
            return False
    return True


def run_property_checks(seed: int = 0, base: ExperimentConfig | None = None) -> dict:
    """Check sparsity, boundedness, label agnosticism and gradients; one entry per property."""
    report = {}
    best, argmax = discriminator_grid_search(0.01)
    corners = all(a != b and sorted(a) == [0.0, 1.0] and sorted(b) == [0.0, 1.0] for a, b in argmax)
    report["discriminator_optimum"] = {"passed": best == 2.0 and corners, "max": best, "argmax": argmax}
    kkt = kkt_residual()
    report["kkt_sparse_point"] = {"passed": kkt == 0.0, "residual": kkt}

    cfg = base or shapes_config(seed, "cas")
    cfg = replace(cfg, loss="cas", seed=seed)
    data = prepare_shapes(cfg)
    params, tl = train(cfg, data)
    spec = network_spec(cfg)
    out = predict(params, spec, data.test, cfg.input_scale)
    frac = sparsity_fraction(out)
    dists = []
    for o, smp in zip(out, data.test):
        means = compute_region_stats(o, smp.regions).means
        dists.append(float(np.sum((means[0] - means[1]) ** 2)))
    report["sparsity"] = {
        "passed": frac >= SPARSITY_FRACTION and float(np.mean(dists)) >= MEAN_DISTANCE_MIN,
        "fraction_confident": frac, "threshold_prob": SPARSITY_PROB, "required_fraction": SPARSITY_FRACTION,
        "min_mean_sq_distance": min(dists), "mean_mean_sq_distance": float(np.mean(dists)),
    }
    n = cfg.data.regions_per_image
    b = losses.cas_bounds(n, cfg.alpha, cfg.channels)
    report["bounds"] = {"passed": all(b.lower <= v <= b.upper for v in tl.losses),
                        "lower": b.lower, "upper": b.upper, "min_logged": min(tl.losses), "max_logged": max(tl.losses)}
    report["permutation_invariance"] = {"passed": permutation_check(seed)}
    gc = gradient_check(seed, instances=10)
    report["gradients"] = {"passed": gc["cas_softmax_max_rel_err"] < 1e-6 and gc["max_rel_err"] < 1e-5, **gc}
    report["all_passed"] = all(v["passed"] for v in report.values() if isinstance(v, dict))
    return report


def run_texture_metrics(seed: int = 0, base: ExperimentConfig | None = None, jobs: int = 1) -> list:
    """Region and contour metrics of argmax segmentations on 3-region images, CAS vs CE."""
    cells = []
    for loss in ("cas", "ce"):
        cfg = base or ExperimentConfig()
        d = replace(cfg.data, regions_per_image=3)
        cfg = replace(cfg, experiment="shapes", loss=loss, seed=seed, data=d, channels=3 if loss == "cas" else 2)
        cells.append((cfg, f"texture-{loss}"))
    return run_cells(_texture_cell, cells, jobs)


def _texture_cell(args):
    cfg, label = args
    data = prepare_shapes(cfg)
    params, tl = train(cfg, data)
    out = predict(params, network_spec(cfg), data.test, cfg.input_scale)
    reports = [metrics.evaluate_partition(o.argmax(axis=-1), smp.regions) for o, smp in zip(out, data.test)]
    return {"cell": label, "loss": cfg.loss, "alpha": cfg.alpha, "flip_fraction": cfg.flip_fraction,
            "steps": len(tl.losses), "final_loss": tl.losses[-1], "channel": -1,
            "within_region_variance": within_region_variance(out, data.test), "sparsity": sparsity_fraction(out),
            "metrics": metrics.MetricsReport.mean(reports)}


# ---------------------------------------------------------------- export

METRICS_CSV_COLUMNS = ("cell", "loss", "alpha", "flip_fraction", "steps", "final_loss", "channel",
                       "within_region_variance", "sparsity") + metrics.CSV_COLUMNS


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_CSV_COLUMNS)
    for row in rows:
        flat = {k: v for k, v in row.items() if k != "metrics"}
        flat.update(row["metrics"].to_dict())
        w.writerow([_fmt(flat[c]) for c in METRICS_CSV_COLUMNS])
    return buf.getvalue()


def _jsonable(o):
    if isinstance(o, metrics.MetricsReport):
        return o.to_dict()
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def dump_json(obj) -> bytes:
    return (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode()


def write_meta(out_dir, extra: dict) -> None:
    meta = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    meta.update(extra)
    atomic_write_bytes(Path(out_dir) / "meta.json", dump_json(meta))


def loss_curve_svg(values, width=480, height=280, title="training loss") -> str:
    """Self-contained SVG polyline of a loss curve with labelled axes."""
    vals = [float(v) for v in values] or [0.0]
    lo, hi = min(vals), max(vals)
    if hi == lo:
        hi = lo + 1.0
    ml, mr, mt, mb = 60, 15, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    n = max(len(vals) - 1, 1)
    pts = " ".join(f"{ml + pw * i / n:.2f},{mt + ph * (1 - (v - lo) / (hi - lo)):.2f}" for i, v in enumerate(vals))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>\n'
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>\n'
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>\n'
        f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle" font-size="12">step</text>\n'
        f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {mt + ph / 2})">loss</text>\n'
        f'<text x="{ml - 4}" y="{mt + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>\n'
        f'<text x="{ml - 4}" y="{mt + ph}" text-anchor="end" font-size="10">{lo:.3g}</text>\n'
        f'<text x="{ml + pw}" y="{mt + ph + 14}" text-anchor="end" font-size="10">{len(vals) - 1}</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.2" points="{pts}"/>\n'
        "</svg>\n"
    )


PRESETS = ("toy-imbalance", "fidelity-sweep", "alpha-sweep", "properties", "texture-metrics")


def preset_config(preset: str, seed: int = 0) -> ExperimentConfig:
    """Base configuration a preset starts from before user overrides."""
    if preset == "toy-imbalance":
        return toy_config(seed, "cas")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return shapes_config(seed, "cas")


def run_preset(preset: str, seed: int, out_dir, base: ExperimentConfig | None = None, jobs: int = 1) -> dict:
    """Run a named experiment and write ``report.json`` (+ ``metrics.csv`` for sweeps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    base = base or preset_config(preset, seed)
    if preset == "toy-imbalance":
        report = run_toy_imbalance(seed, base, jobs)
    elif preset in ("fidelity-sweep", "alpha-sweep", "texture-metrics"):
        if preset == "fidelity-sweep":
            rows = run_fidelity_sweep(FIDELITY_FRACTIONS, seed, base, jobs)
        elif preset == "alpha-sweep":
            rows = run_alpha_ablation(ALPHAS, seed, base, jobs)
        else:
            rows = run_texture_metrics(seed, base, jobs)
        atomic_write_bytes(out / "metrics.csv", metrics_csv(rows).encode())
        report = {"preset": preset, "seed": seed, "cells": rows}
    elif preset == "properties":
        report = run_property_checks(seed, base)
    else:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    atomic_write_bytes(out / "report.json", dump_json(report))
    write_meta(out, {"preset": preset, "seed": seed, "wall_time": time.perf_counter() - t0})
    return report
