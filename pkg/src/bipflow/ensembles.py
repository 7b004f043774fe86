"""Empirical ensemble statistics: means, covariances, localisation, corrections.

Ensembles are plain ``(M, n_dim)`` arrays, one particle per row.  All
covariances use the ``1/M`` normalization.  Localised statistics weight the
ensemble per particle with distance-dependent weights; the weight matrix is
row-stochastic, row ``i`` holding the weights particle ``i`` assigns to the
ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError
from .validation import as_ensemble, as_spd_matrix, check_positive


@dataclass(frozen=True, eq=False)
class LocalisationConfig:
    """Scaling ``gamma`` and SPD distance metric for localisation weights.

    The squared distance between particles is measured as
    ``d(a, b) = (a-b)^T metric^{-1} (a-b)``.
    """

    gamma: float
    metric: np.ndarray
    metric_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        check_positive(self.gamma, "gamma")
        metric = as_spd_matrix(self.metric, "metric")
        object.__setattr__(self, "metric", metric)
        object.__setattr__(self, "metric_inv", np.linalg.inv(metric))


def ensemble_mean(particles) -> np.ndarray:
    particles = as_ensemble(particles)
    return particles.mean(axis=0)


def ensemble_covariance(particles) -> np.ndarray:
    """Empirical covariance with 1/M normalization (symmetric PSD)."""
    particles = as_ensemble(particles)
    centered = particles - particles.mean(axis=0)
    cov = centered.T @ centered / particles.shape[0]
    return 0.5 * (cov + cov.T)


def cross_covariance(particles, h_values) -> np.ndarray:
    """Empirical cross-covariance between particles and mapped values.

    Equals ``ensemble_covariance(particles) @ A.T`` exactly when the map is
    linear, ``h(x) = A x``.
    """
    particles = as_ensemble(particles)
    h_values = np.atleast_2d(np.asarray(h_values, dtype=float))
    if h_values.shape[0] != particles.shape[0]:
        raise ConfigurationError(
            f"h_values has {h_values.shape[0]} rows, particles has {particles.shape[0]}"
        )
    xc = particles - particles.mean(axis=0)
    hc = h_values - h_values.mean(axis=0)
    return xc.T @ hc / particles.shape[0]


def spread(particles) -> float:
    """Mean squared deviation from the ensemble mean; equals trace of the covariance."""
    particles = as_ensemble(particles)
    centered = particles - particles.mean(axis=0)
    return float(np.sum(centered * centered)) / particles.shape[0]


def localisation_weights(particles, config: LocalisationConfig) -> np.ndarray:
    """Row-stochastic distance-dependent weight matrix.

    ``w[i, j] = exp(-d(x_i, x_j) / (2 gamma)) / sum_l exp(-d(x_i, x_l) / (2 gamma))``.
    Rows are normalized with the per-row max exponent subtracted first, so
    small ``gamma`` cannot overflow.
    """
    particles = as_ensemble(particles)
    diffs = particles[:, None, :] - particles[None, :, :]
    quad = np.einsum("ijk,kl,ijl->ij", diffs, config.metric_inv, diffs)
    logw = -quad / (2.0 * config.gamma)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def localised_means(particles, weights) -> np.ndarray:
    """Per-particle weighted means, row ``i`` using weight row ``i``."""
    return np.asarray(weights) @ as_ensemble(particles)


def localised_covariances(particles, weights) -> np.ndarray:
    """Per-particle weighted covariances, shape ``(M, n_dim, n_dim)``."""
    particles = as_ensemble(particles)
    weights = np.asarray(weights, dtype=float)
    means = weights @ particles
    centered = particles[None, :, :] - means[:, None, :]
    cov = np.einsum("ij,ijk,ijl->ikl", weights, centered, centered)
    return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


def localised_cross_covariances(particles, h_values, weights) -> np.ndarray:
    """Per-particle weighted cross-covariances, shape ``(M, n_dim, n_obs)``."""
    particles = as_ensemble(particles)
    h_values = np.atleast_2d(np.asarray(h_values, dtype=float))
    weights = np.asarray(weights, dtype=float)
    xm = weights @ particles
    hm = weights @ h_values
    xc = particles[None, :, :] - xm[:, None, :]
    hc = h_values[None, :, :] - hm[:, None, :]
    return np.einsum("ij,ijk,ijl->ikl", weights, xc, hc)


def grad_localisation_weights(particles, weights, config: LocalisationConfig) -> np.ndarray:
    """Gradient of each weight ``w[i, j]`` in particle ``i``.

    Closed form ``(w_ij / gamma) metric^{-1} (x_j - xbar_i)`` with the
    localised mean ``xbar_i``; returned with shape ``(M, M, n_dim)``.
    Rows satisfy ``sum_j grad[i, j] = 0`` since each weight row sums to one.
    """
    particles = as_ensemble(particles)
    weights = np.asarray(weights, dtype=float)
    means = weights @ particles
    rel = particles[None, :, :] - means[:, None, :]
    return (weights[:, :, None] / config.gamma) * (rel @ config.metric_inv)


def divergence_correction(particles) -> np.ndarray:
    """Divergence of the global empirical covariance in each particle.

    ``(n_dim + 1) / M * (x_i - xbar)`` per particle, shape ``(M, n_dim)``.
    """
    particles = as_ensemble(particles)
    n, d = particles.shape
    return (d + 1.0) / n * (particles - particles.mean(axis=0))


def divergence_correction_localised(particles, weights, config: LocalisationConfig) -> np.ndarray:
    """Divergence of the localised covariance map ``x_i -> P(x_i)`` per particle.

    Combines the self-weight term with the three weight-gradient sums; reduces
    to :func:`divergence_correction` in the uniform-weight limit.
    """
    particles = as_ensemble(particles)
    weights = np.asarray(weights, dtype=float)
    n, d = particles.shape
    means = weights @ particles
    grads = grad_localisation_weights(particles, weights, config)

    term_self = (d + 1.0) * np.diag(weights)[:, None] * (particles - means)
    # sum_j X_j (X_j . g_ij)  -  sum_j xbar_i (X_j . g_ij)  -  sum_j X_j (xbar_i . g_ij)
    xj_dot_g = np.einsum("jn,ijn->ij", particles, grads)
    term_a = xj_dot_g @ particles
    term_b = xj_dot_g.sum(axis=1)[:, None] * means
    xbar_dot_g = np.einsum("in,ijn->ij", means, grads)
    term_c = xbar_dot_g @ particles
    return term_self + term_a - term_b - term_c


def psd_sqrt(matrix, *, sym_tol=1e-10, eig_tol=1e-10) -> np.ndarray:
    """Symmetric square root of a symmetric positive semi-definite matrix.

    Uses an eigendecomposition; eigenvalues in ``[-tol, 0)`` are clipped to
    zero while anything below ``-tol`` is an error.  Tolerances scale with
    the matrix magnitude so rank-deficient covariances of large ensembles do
    not trip the check spuriously.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(f"need a square matrix, got shape {matrix.shape}")
    scale = max(1.0, float(np.abs(matrix).max()))
    if np.abs(matrix - matrix.T).max() > sym_tol * scale:
        raise ConfigurationError("matrix is not symmetric within tolerance")
    eigvals, eigvecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    if eigvals.min() < -eig_tol * scale:
        raise ConfigurationError(
            f"matrix is indefinite: min eigenvalue {eigvals.min():.3e}"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def psd_sqrt_stack(matrices, *, eig_tol=1e-10) -> np.ndarray:
    """Symmetric square roots of a stack of PSD matrices, shape ``(M, d, d)``."""
    matrices = np.asarray(matrices, dtype=float)
    sym = 0.5 * (matrices + np.transpose(matrices, (0, 2, 1)))
    eigvals, eigvecs = np.linalg.eigh(sym)
    scale = np.maximum(1.0, np.abs(eigvals).max(axis=1))
    if np.any(eigvals[:, 0] < -eig_tol * scale):
        worst = int(np.argmin(eigvals[:, 0] / scale))
        raise ConfigurationError(
            f"matrix {worst} in stack is indefinite: min eigenvalue {eigvals[worst, 0]:.3e}"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    return np.einsum("mik,mk,mjk->mij", eigvecs, np.sqrt(eigvals), eigvecs)
