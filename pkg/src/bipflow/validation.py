"""Input validation helpers shared by the estimators and the functional core."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError


def as_vector(x, name="x", dim=None):
    """Coerce to a finite 1-D float array, optionally checking its length."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim != 1:
        raise ConfigurationError(f"{name} must be a vector, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ConfigurationError(f"{name} must have length {dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return x


def as_matrix(a, name="matrix", shape=None):
    """Coerce to a 2-D float array, optionally checking its shape."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise ConfigurationError(f"{name} must be a matrix, got shape {a.shape}")
    if shape is not None and a.shape != tuple(shape):
        raise ConfigurationError(f"{name} must have shape {tuple(shape)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return a


def as_spd_matrix(a, name="matrix", sym_tol=1e-8):
    """Validate a symmetric positive-definite matrix and return it as float array.

    Symmetry is checked entrywise relative to the matrix scale; positive
    definiteness through a Cholesky factorization attempt.
    """
    a = as_matrix(a, name=name)
    if a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise ConfigurationError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ConfigurationError(f"{name} is not positive definite") from None
    return a


def as_ensemble(x, name="particles", n_dim=None):
    """Coerce to an (M, n_dim) array of finite particle positions."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ConfigurationError(f"{name} must be an (M, n_dim) array, got shape {x.shape}")
    if n_dim is not None and x.shape[1] != n_dim:
        raise ConfigurationError(
            f"{name} must have {n_dim} columns, got {x.shape[1]}"
        )
    if not np.all(np.isfinite(x)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return x


def check_positive(value, name):
    value = float(value)
    if not value > 0:
        raise ConfigurationError(f"{name} must be positive, got {value}")
    return value


def check_nonnegative(value, name):
    value = float(value)
    if value < 0:
        raise ConfigurationError(f"{name} must be nonnegative, got {value}")
    return value


def check_choice(value, options, name):
    if value not in options:
        raise ConfigurationError(f"{name} must be one of {sorted(options)}, got {value!r}")
    return value
