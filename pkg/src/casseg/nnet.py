"""A deliberately tiny numpy network: dense, 3x3 conv, ReLU and softmax layers.

Activations are batches of channel-last grids, shape ``(B, H, W, C)``.  A
``dense`` layer acts on the channel axis of every pixel independently (a 1x1
convolution).  ``conv3x3`` uses zero "same" padding; its weight is stored in
im2col layout ``(9 * in_ch, out_ch)`` with row index ``c * 9 + 3 * di + dj``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gridio import encode_array, decode_array, atomic_write_bytes

LAYER_KINDS = ("dense", "conv3x3", "relu", "softmax")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv3x3") and (self.n_in < 1 or self.n_out < 1):
            raise ValueError(f"{self.kind} layer needs positive n_in/n_out")

    def to_dict(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


def dense(n_in, n_out):
    return LayerSpec("dense", n_in, n_out)


def conv3x3(n_in, n_out):
    return LayerSpec("conv3x3", n_in, n_out)


RELU = LayerSpec("relu")
SOFTMAX = LayerSpec("softmax")


def validate_spec(spec) -> tuple[int, int]:
    """Check that consecutive layers compose; return ``(in_channels, out_channels)``."""
    spec = list(spec)
    if not spec or spec[-1].kind != "softmax":
        raise ShapeError("network must end with a softmax layer")
    width = None
    n_in = None
    for layer in spec:
        if layer.kind in ("dense", "conv3x3"):
            if width is not None and layer.n_in != width:
                raise ShapeError(f"layer expects {layer.n_in} channels, previous layer gives {width}")
            if n_in is None:
                n_in = layer.n_in
            width = layer.n_out
    if width is None:
        raise ShapeError("network has no trainable layer")
    return n_in, width


@dataclass
class ModelParams:
    tensors: list  # per layer: {"W": ..., "b": ...} or {} for parameter-free layers
    seed: int = 0

    def arrays(self):
        for i, layer in enumerate(self.tensors):
            for name in sorted(layer):
                yield (i, name), layer[name]

    def copy(self) -> "ModelParams":
        return ModelParams([{k: v.copy() for k, v in t.items()} for t in self.tensors], self.seed)

    def size(self) -> int:
        return sum(a.size for _, a in self.arrays())


def init_params(spec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    validate_spec(spec)
    rng = np.random.Generator(np.random.Philox(seed))
    tensors = []
    for layer in spec:
        if layer.kind == "dense":
            a = np.sqrt(6.0 / (layer.n_in + layer.n_out))
            tensors.append({"W": rng.uniform(-a, a, (layer.n_in, layer.n_out)), "b": np.zeros(layer.n_out)})
        elif layer.kind == "conv3x3":
            a = np.sqrt(6.0 / (9 * layer.n_in + 9 * layer.n_out))
            tensors.append({"W": rng.uniform(-a, a, (9 * layer.n_in, layer.n_out)), "b": np.zeros(layer.n_out)})
        else:
            tensors.append({})
    return ModelParams(tensors, seed)


def _im2col(x):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return win.reshape(b * h * w, c * 9)


def _col2im(dcols, shape):
    b, h, w, c = shape
    d = dcols.reshape(b, h, w, c, 3, 3)
    dp = np.zeros((b, h + 2, w + 2, c))
    for di in range(3):
        for dj in range(3):
            dp[:, di:di + h, dj:dj + w, :] += d[..., di, dj]
    return dp[:, 1:-1, 1:-1, :]


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Cache:
    spec: tuple
    params_ref: list
    inputs: list = field(default_factory=list)
    extra: list = field(default_factory=list)


def forward(params: ModelParams, spec, x):
    """Run the network on a batch; returns ``(softmax output, cache)``.

    A single ``(H, W, C)`` grid is promoted to a batch of one.
    """
    spec = tuple(spec)
    n_in, _ = validate_spec(spec)
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != n_in:
        raise ShapeError(f"input shape {x.shape} does not match network input channels {n_in}")
    if len(params.tensors) != len(spec):
        raise ShapeError("parameter list does not match layer spec")
    cache = Cache(spec, [t.get("W") for t in params.tensors])
    for layer, t in zip(spec, params.tensors):
        cache.inputs.append(x)
        if layer.kind == "dense":
            x = x @ t["W"] + t["b"]
            cache.extra.append(None)
        elif layer.kind == "conv3x3":
            cols = _im2col(x)
            cache.extra.append(cols)
            x = (cols @ t["W"] + t["b"]).reshape(*x.shape[:3], t["W"].shape[1])
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
            cache.extra.append(None)
        else:
            x = softmax(x)
            cache.extra.append(x)
    return x, cache


def backward(params: ModelParams, spec, cache: Cache, upstream):
    """Parameter gradients given ``dLoss/d(output)``; same nesting as ``params.tensors``."""
    spec = tuple(spec)
    if cache.spec != spec or len(cache.params_ref) != len(params.tensors) or any(
        ref is not t.get("W") for ref, t in zip(cache.params_ref, params.tensors)
    ):
        raise StaleCacheError("cache was produced by a different forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    out_shape = cache.extra[-1].shape
    if g.ndim == 3:
        g = g[None]
    if g.shape != out_shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {out_shape}")
    grads = [dict() for _ in spec]
    for i in range(len(spec) - 1, -1, -1):
        layer, t, x = spec[i], params.tensors[i], cache.inputs[i]
        if layer.kind == "softmax":
            s = cache.extra[i]
            g = s * (g - np.sum(g * s, axis=-1, keepdims=True))
        elif layer.kind == "relu":
            g = g * (x > 0)
        elif layer.kind == "dense":
            g2 = g.reshape(-1, g.shape[-1])
            grads[i] = {"W": x.reshape(-1, x.shape[-1]).T @ g2, "b": g2.sum(axis=0)}
            g = g @ t["W"].T
        else:
            g2 = g.reshape(-1, g.shape[-1])
            cols = cache.extra[i]
            grads[i] = {"W": cols.T @ g2, "b": g2.sum(axis=0)}
            g = _col2im(g2 @ t["W"].T, x.shape)
    return grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_init(params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    zeros = [{k: np.zeros_like(a) for k, a in t.items()} for t in params.tensors]
    return AdamState(lr, beta1, beta2, epsilon, 0, zeros, [{k: a.copy() for k, a in t.items()} for t in zeros])


def adam_step(params: ModelParams, grads, state: AdamState):
    """One bias-corrected Adam update; returns new ``(params, state)``, inputs untouched."""
    if len(grads) != len(params.tensors):
        raise ShapeError("gradient list does not match parameters")
    for i, (t, g) in enumerate(zip(params.tensors, grads)):
        if set(t) != set(g):
            raise ShapeError(f"layer {i}: gradient keys {sorted(g)} vs parameters {sorted(t)}")
        for k in t:
            if g[k].shape != t[k].shape:
                raise ShapeError(f"layer {i} {k}: gradient shape {g[k].shape} vs {t[k].shape}")
            if not np.all(np.isfinite(g[k])):
                raise NonFiniteError(f"non-finite gradient in layer {i} {k} at step {state.step + 1}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_t, new_m, new_v = [], [], []
    for t, g, m, v in zip(params.tensors, grads, state.m, state.v):
        nt, nm, nv = {}, {}, {}
        for k in t:
            nm[k] = b1 * m[k] + (1.0 - b1) * g[k]
            nv[k] = b2 * v[k] + (1.0 - b2) * (g[k] * g[k])
            nt[k] = t[k] - state.lr * (nm[k] / bc1) / (np.sqrt(nv[k] / bc2) + state.epsilon)
        new_t.append(nt)
        new_m.append(nm)
        new_v.append(nv)
    new_state = AdamState(state.lr, b1, b2, state.epsilon, step, new_m, new_v)
    return ModelParams(new_t, params.seed), new_state


def finite_difference_grad(loss_fn: Callable[[ModelParams], float], params: ModelParams, eps: float = 1e-6):
    """Central-difference gradient of ``loss_fn`` for every parameter entry."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = params.copy()
    grads = [{k: np.zeros_like(a) for k, a in t.items()} for t in work.tensors]
    for (i, k), a in work.arrays():
        flat = a.reshape(-1)
        out = grads[i][k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_fn(work)
            flat[j] = orig - eps
            fm = loss_fn(work)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while perturbing layer {i} {k}[{j}]")
            out[j] = (fp - fm) / (2.0 * eps)
    return grads


def relative_error(analytic, numeric) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``.

    Accepts arrays or the nested per-layer gradient lists, which are treated
    as one flat vector.  An elementwise ratio is avoided on purpose: central
    differences carry ~1e-10 absolute round-off, which swamps tiny components.
    """
    if isinstance(analytic, list):
        a = np.concatenate([np.ravel(t[k]) for t in analytic for k in sorted(t)] or [np.zeros(0)])
        n = np.concatenate([np.ravel(t[k]) for t in numeric for k in sorted(t)] or [np.zeros(0)])
    else:
        a = np.ravel(np.asarray(analytic, dtype=np.float64))
        n = np.ravel(np.asarray(numeric, dtype=np.float64))
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def save_checkpoint(directory, params: ModelParams, spec, step: int = 0) -> None:
    """One flat-binary grid per tensor plus ``manifest.json``.

    2-D weights are written as ``(rows, cols, 1)`` grids, biases as ``(1, n, 1)``.
    """
    d = Path(directory)
    entries = []
    for (i, k), a in params.arrays():
        name = f"layer{i}_{k}.casg"
        grid = a.reshape(1, -1, 1) if a.ndim == 1 else a[:, :, None]
        atomic_write_bytes(d / name, encode_array(grid))
        entries.append({"layer": i, "name": k, "file": name, "shape": list(a.shape)})
    manifest = {"layers": [l.to_dict() for l in spec], "seed": params.seed, "step": step, "tensors": entries}
    atomic_write_bytes(d / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(directory):
    """Returns ``(params, spec, step)``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spec = tuple(LayerSpec(**l) for l in manifest["layers"])
    tensors = [dict() for _ in spec]
    for e in manifest["tensors"]:
        a = decode_array((d / e["file"]).read_bytes())
        tensors[e["layer"]][e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return ModelParams(tensors, manifest["seed"]), spec, manifest["step"]
