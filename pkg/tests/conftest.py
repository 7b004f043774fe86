"""Shared numeric oracles: finite differences and random test data."""

import numpy as np
import pytest


def fd_gradient(f, x, eps=1e-6):
    """Central finite-difference gradient with componentwise relative steps."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for k in range(x.size):
        step = eps * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        grad[k] = (f(xp) - f(xm)) / (2 * step)
    return grad


def fd_jacobian(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        step = eps * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * step))
    return np.stack(cols, axis=-1)


def fd_matrix_divergence(field, x, eps=1e-6):
    """Divergence of a matrix field: div_k = sum_m d field[k, m] / d x_m."""
    x = np.asarray(x, dtype=float)
    div = np.zeros(x.size)
    for m in range(x.size):
        step = eps * max(1.0, abs(x[m]))
        xp, xm = x.copy(), x.copy()
        xp[m] += step
        xm[m] -= step
        diff = (np.asarray(field(xp)) - np.asarray(field(xm))) / (2 * step)
        div += diff[:, m]
    return div


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    denom = max(np.max(np.abs(exact)), 1e-12)
    return np.max(np.abs(approx - exact)) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
