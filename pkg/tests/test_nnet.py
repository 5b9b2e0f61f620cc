import numpy as np
import pytest

from casseg.losses import cas_backward, cas_forward
from casseg.nnet import (
    RELU,
    SOFTMAX,
    NonFiniteError,
    ShapeError,
    StaleCacheError,
    adam_init,
    adam_step,
    backward,
    conv3x3,
    dense,
    finite_difference_grad,
    forward,
    init_params,
    load_checkpoint,
    relative_error,
    save_checkpoint,
    validate_spec,
)
from casseg.regions import RegionMap

SPEC = (conv3x3(3, 3), RELU, dense(3, 2), SOFTMAX)


def naive_conv(x, w, b):
    """Explicit nine-tap loop with zero padding, independent of the im2col path."""
    h, wd, c = x.shape
    out = np.zeros((h, wd, w.shape[1]))
    for y in range(h):
        for xx in range(wd):
            for ch in range(c):
                for di in range(3):
                    for dj in range(3):
                        yy, xs = y + di - 1, xx + dj - 1
                        if 0 <= yy < h and 0 <= xs < wd:
                            out[y, xx] += x[yy, xs, ch] * w[ch * 9 + 3 * di + dj]
    return out + b


def test_conv_matches_naive_loop(rng):
    p = init_params((conv3x3(2, 3), SOFTMAX), 1)
    p.tensors[0]["b"] = rng.normal(size=3)
    x = rng.normal(size=(5, 4, 2))
    out, _ = forward(p, (conv3x3(2, 3), SOFTMAX), x)
    z = naive_conv(x, p.tensors[0]["W"], p.tensors[0]["b"])
    e = np.exp(z - z.max(axis=2, keepdims=True))
    np.testing.assert_allclose(out[0], e / e.sum(axis=2, keepdims=True), rtol=0, atol=1e-14)


def test_output_is_simplex(rng):
    p = init_params(SPEC, 3)
    out, _ = forward(p, SPEC, rng.normal(size=(2, 6, 5, 3)) * 10)
    assert out.shape == (2, 6, 5, 2)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_glorot_range_and_determinism():
    a = init_params((dense(4, 6), RELU, dense(6, 2), SOFTMAX), 7)
    b = init_params((dense(4, 6), RELU, dense(6, 2), SOFTMAX), 7)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.arrays(), b.arrays()))
    assert np.max(np.abs(a.tensors[0]["W"])) <= np.sqrt(6 / 10)
    assert np.all(a.tensors[0]["b"] == 0)
    assert a.size() == 4 * 6 + 6 + 6 * 2 + 2


def test_spec_validation():
    with pytest.raises(ShapeError):
        validate_spec((dense(2, 3), RELU, dense(4, 2), SOFTMAX))
    with pytest.raises(ShapeError):
        validate_spec((dense(2, 3),))
    with pytest.raises(ValueError):
        dense(0, 2)
    assert validate_spec(SPEC) == (3, 2)


@pytest.mark.parametrize("spec", [SPEC, (dense(2, 4), RELU, dense(4, 3), SOFTMAX)])
def test_backward_matches_finite_differences(rng, spec):
    n_in = spec[0].n_in
    p = init_params(spec, 11)
    for t in p.tensors:
        if "b" in t:
            t["b"] = rng.normal(size=t["b"].shape) * 0.1
    x = rng.normal(size=(4, 4, n_in))
    r = RegionMap(np.repeat([[0, 0, 1, 1]], 4, axis=0))

    def loss(params):
        out, _ = forward(params, spec, x)
        return cas_forward(out[0], r, 0.1)

    out, cache = forward(p, spec, x)
    grads = backward(p, spec, cache, cas_backward(out[0], r, 0.1))
    assert relative_error(grads, finite_difference_grad(loss, p)) < 1e-5


def test_stale_cache_and_shape_errors(rng):
    p = init_params(SPEC, 0)
    out, cache = forward(p, SPEC, rng.normal(size=(3, 3, 3)))
    q = init_params(SPEC, 1)
    with pytest.raises(StaleCacheError):
        backward(q, SPEC, cache, np.zeros_like(out))
    with pytest.raises(ShapeError):
        backward(p, SPEC, cache, np.zeros((1, 3, 3, 5)))
    with pytest.raises(ShapeError):
        forward(p, SPEC, np.zeros((3, 3, 2)))


def test_adam_first_step_moves_by_lr():
    p = init_params((dense(2, 2), SOFTMAX), 0)
    g = [{"W": np.array([[1.0, -2.0], [0.5, 0.0]]), "b": np.array([3.0, -1.0])}, {}]
    st = adam_init(p, lr=0.01)
    p2, st2 = adam_step(p, g, st)
    # with bias correction the first step is lr * sign(g) up to epsilon
    expected = p.tensors[0]["W"] - 0.01 * np.sign(g[0]["W"]) * (np.abs(g[0]["W"]) / (np.abs(g[0]["W"]) + 1e-8))
    np.testing.assert_allclose(p2.tensors[0]["W"], expected, rtol=0, atol=1e-15)
    assert st2.step == 1 and st.step == 0
    # inputs untouched
    assert np.array_equal(p.tensors[0]["b"], np.zeros(2))


def test_adam_matches_reference_over_steps(rng):
    p = init_params((dense(3, 2), SOFTMAX), 5)
    st = adam_init(p, lr=0.05)
    w = p.tensors[0]["W"].copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, 6):
        gw = rng.normal(size=w.shape)
        p, st = adam_step(p, [{"W": gw, "b": np.zeros(2)}, {}], st)
        m = 0.9 * m + 0.1 * gw
        v = 0.999 * v + 0.001 * gw**2
        w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.tensors[0]["W"], w, rtol=0, atol=1e-14)


def test_adam_minimises_quadratic():
    p = init_params((dense(1, 1), SOFTMAX), 0)
    st = adam_init(p, lr=0.05)
    for _ in range(500):
        w = p.tensors[0]["W"]
        p, st = adam_step(p, [{"W": 2 * (w - 3.0), "b": np.zeros(1)}, {}], st)
    assert abs(p.tensors[0]["W"][0, 0] - 3.0) < 1e-2


def test_adam_rejects_bad_gradients():
    p = init_params((dense(2, 2), SOFTMAX), 0)
    st = adam_init(p)
    with pytest.raises(NonFiniteError):
        adam_step(p, [{"W": np.full((2, 2), np.nan), "b": np.zeros(2)}, {}], st)
    with pytest.raises(ShapeError):
        adam_step(p, [{"W": np.zeros((3, 2)), "b": np.zeros(2)}, {}], st)


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([2.0, 1e-9]), np.array([2.0, 2e-9])) == pytest.approx(5e-10)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SPEC, 9)
    save_checkpoint(tmp_path, p, SPEC, step=42)
    q, spec, step = load_checkpoint(tmp_path)
    assert spec == SPEC and step == 42 and q.seed == 9
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(p.arrays(), q.arrays()))
