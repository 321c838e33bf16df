"""Numeric substrate: bilinear forms, symmetric parametrisation, the
Moore-Penrose pseudoinverse and first-order optimisers with freeze masks."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NonFinite


def symmetrize(raw: np.ndarray) -> np.ndarray:
    """Effective value ``(raw + raw.T) / 2`` of a symmetric parameter (batched on the last two axes)."""
    return 0.5 * (raw + np.swapaxes(raw, -1, -2))


class SymmetricParam:
    def __init__(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {raw.shape}")
        self.raw = raw

    @property
    def value(self) -> np.ndarray:
        return symmetrize(self.raw)


def bilinear(x, m, y) -> float:
    """``x.T @ sym(m) @ y`` where ``m`` is a SymmetricParam or raw square array."""
    eff = m.value if isinstance(m, SymmetricParam) else symmetrize(np.asarray(m, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (eff.shape[0],) or y.shape != (eff.shape[1],):
        raise DimensionMismatch(f"shapes {x.shape}, {eff.shape}, {y.shape} do not agree")
    # both orders averaged so swapping x and y is bit-identical
    return float(0.5 * ((x @ eff) @ y + (y @ eff) @ x))


def pseudoinverse(m, tol=None) -> np.ndarray:
    """Moore-Penrose pseudoinverse through the SVD.

    Singular values at or below ``tol * sigma_max`` are treated as zero;
    the default cutoff is ``eps * max(rows, cols)``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite("matrix has non-finite entries")
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return np.zeros((cols, rows))
    if tol is None:
        tol = np.finfo(np.float64).eps * max(rows, cols)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cutoff = tol * (s[0] if s.size else 0.0)
    inv = np.zeros_like(s)
    keep = s > cutoff
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


class SGD:
    """Plain update ``p -= lr * g``."""

    def __init__(self, learning_rate: float = 1e-2):
        self.learning_rate = learning_rate
        self.steps = 0

    def step(self, params: dict, grads: dict, masks: dict | None = None) -> None:
        _check_shapes(params, grads)
        self.steps += 1
        for name in sorted(grads):
            upd = self.learning_rate * grads[name]
            _apply(params[name], upd, None if masks is None else masks.get(name))


class Adam:
    """Moment-based adaptive update with bias correction.

    Rows selected by a boolean freeze mask keep their values and their
    moment estimates untouched.
    """

    def __init__(self, learning_rate: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.steps = 0

    def step(self, params: dict, grads: dict, masks: dict | None = None) -> None:
        _check_shapes(params, grads)
        self.steps += 1
        t = self.steps
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            frozen = None if masks is None else masks.get(name)
            m, v = self.m[name], self.v[name]
            new_m = self.beta1 * m + (1 - self.beta1) * g
            new_v = self.beta2 * v + (1 - self.beta2) * g * g
            if frozen is not None:
                new_m[frozen] = m[frozen]
                new_v[frozen] = v[frozen]
            self.m[name], self.v[name] = new_m, new_v
            mhat = new_m / (1 - self.beta1 ** t)
            vhat = new_v / (1 - self.beta2 ** t)
            _apply(params[name], self.learning_rate * mhat / (np.sqrt(vhat) + self.eps), frozen)


def _check_shapes(params: dict, grads: dict) -> None:
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise DimensionMismatch(f"gradient {name!r} does not match its parameter")


def _apply(param: np.ndarray, update: np.ndarray, frozen) -> None:
    if frozen is None:
        param -= update
    else:
        live = ~frozen
        param[live] -= update[live]


def make_optimizer(name: str, learning_rate: float):
    if name == "adam":
        return Adam(learning_rate)
    if name == "sgd":
        return SGD(learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")


def sgd_step(params: dict, grads: dict, state, masks: dict | None = None) -> None:
    """Apply one in-place update of ``state`` (an :class:`SGD` or :class:`Adam`)."""
    state.step(params, grads, masks)
