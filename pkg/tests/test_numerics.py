import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from relembed.errors import DimensionMismatch, NonFinite
from relembed.numerics import SGD, Adam, SymmetricParam, bilinear, make_optimizer, pseudoinverse, sgd_step, symmetrize


def loop_bilinear(x, raw, y):
    n = len(x)
    return sum(x[i] * 0.5 * (raw[i][j] + raw[j][i]) * y[j] for i in range(n) for j in range(n))


def test_bilinear_examples():
    e1 = np.array([1.0, 0.0])
    assert bilinear(e1, np.eye(2), e1) == 1.0
    assert bilinear(np.zeros(2), np.eye(2), e1) == 0.0
    raw = np.array([[1.0, 0.0], [2.0, 1.0]])
    assert np.array_equal(SymmetricParam(raw).value, np.ones((2, 2)))
    assert bilinear([1, 2], SymmetricParam(raw), [3, 4]) == 21.0
    assert loop_bilinear([1, 2], raw, [3, 4]) == 21.0


def test_bilinear_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        bilinear([1, 2, 3], np.eye(2), [1, 2])
    with pytest.raises(DimensionMismatch):
        SymmetricParam(np.zeros((2, 3)))


@settings(max_examples=50)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-10, 10)),
    arrays(np.float64, (n, n), elements=st.floats(-10, 10)),
    arrays(np.float64, n, elements=st.floats(-10, 10)))))
def test_bilinear_matches_loop_and_is_symmetric(args):
    x, raw, y = args
    got = bilinear(x, raw, y)
    assert got == pytest.approx(loop_bilinear(x, raw, y), abs=1e-9)
    assert got == pytest.approx(bilinear(y, raw, x), abs=1e-9)
    assert np.array_equal(symmetrize(raw), symmetrize(raw).T)


def penrose_residuals(m, p):
    scale = max(1.0, np.linalg.norm(m))
    return [np.linalg.norm(m @ p @ m - m) / scale,
            np.linalg.norm(p @ m @ p - p) / max(1.0, np.linalg.norm(p)),
            np.linalg.norm((m @ p).T - m @ p),
            np.linalg.norm((p @ m).T - p @ m)]


def test_pinv_examples():
    assert np.allclose(pseudoinverse(np.eye(3)), np.eye(3))
    assert np.allclose(pseudoinverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    m = np.random.default_rng(0).normal(size=(40, 10))
    assert np.abs(pseudoinverse(m) @ m - np.eye(10)).max() < 1e-8


def test_pinv_errors_and_empty():
    with pytest.raises(NonFinite):
        pseudoinverse(np.array([[np.nan, 1.0]]))
    assert pseudoinverse(np.zeros((0, 3))).shape == (3, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12), st.integers(0, 12))
def test_pinv_penrose_identities(seed, rows, cols, rank):
    rng = np.random.default_rng(seed)
    rank = min(rank, rows, cols)
    m = rng.normal(size=(rows, rank)) @ rng.normal(size=(rank, cols)) if rank else np.zeros((rows, cols))
    p = pseudoinverse(m)
    assert max(penrose_residuals(m, p)) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_pinv_involution_well_conditioned(seed, n):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n + 3, n)))
    m = q @ np.diag(rng.uniform(0.5, 2.0, size=n))
    assert np.abs(pseudoinverse(pseudoinverse(m)) - m).max() < 1e-6


def test_pinv_tolerance_cuts_small_singular_values():
    m = np.diag([1.0, 1e-3])
    assert np.allclose(pseudoinverse(m, tol=1e-2), np.diag([1.0, 0.0]))


def test_sgd_arithmetic():
    p = {"w": np.array([1.0])}
    SGD(0.1).step(p, {"w": np.array([2.0])})
    assert p["w"][0] == pytest.approx(0.8)


@pytest.mark.parametrize("opt", [SGD(0.1), Adam(0.1)])
def test_zero_gradient_leaves_parameters(opt):
    w = np.arange(6.0).reshape(3, 2)
    p = {"w": w.copy()}
    opt.step(p, {"w": np.zeros_like(w)})
    assert np.array_equal(p["w"], w)


@pytest.mark.parametrize("name", ["sgd", "adam"])
def test_frozen_row_bit_identical(name):
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3))
    p = {"w": w.copy()}
    opt = make_optimizer(name, 0.1)
    mask = np.array([False, True, False, True])
    for _ in range(5):
        sgd_step(p, {"w": rng.normal(size=(4, 3))}, opt, {"w": mask})
    assert np.array_equal(p["w"][mask], w[mask])
    assert not np.allclose(p["w"][~mask], w[~mask])


def test_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        SGD().step({"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)


def test_adam_matches_scalar_reference():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    p = {"w": np.array([0.5])}
    opt = Adam(lr, b1, b2, eps)
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        opt.step(p, {"w": np.array([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        assert p["w"][0] == pytest.approx(x, abs=1e-12)


def test_adam_minimises_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    opt = Adam(0.1)
    for _ in range(500):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.abs(p["w"]).max() < 1e-2
