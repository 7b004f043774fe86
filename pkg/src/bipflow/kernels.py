"""Kernel functions for the smoothed particle flow and bandwidth policies.

Two kernel families are supported:

* ``gaussian``: unnormalised Gaussian bump ``exp(-0.5 (x-x')^T B^{-1} (x-x'))``
  with SPD bandwidth matrix ``B``;
* ``data_driven``: the Gaussian bump rescaled by anchor-point sums,
  ``psi(x, x') / sqrt(sum_a psi(a, x')) / sqrt(sum_a psi(x, a))``, with the
  anchor set fixed once (here: the initial ensemble).

Both are symmetric in their arguments.  Normalisation constants are dropped
throughout; they cancel in every gradient the flow needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, DegenerateEnsembleError
from .validation import as_ensemble, as_spd_matrix, check_choice, check_positive

KERNEL_FAMILIES = ("gaussian", "data_driven")
BANDWIDTH_MODES = (
    "fixed_prior",
    "adaptive_covariance",
    "amise_fixed",
    "amise_adaptive",
    "fixed_matrix",
)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Kernel family plus bandwidth matrix (and anchors for the data-driven family)."""

    bandwidth: np.ndarray
    family: str = "gaussian"
    anchors: Optional[np.ndarray] = None
    bandwidth_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        check_choice(self.family, KERNEL_FAMILIES, "family")
        bw = as_spd_matrix(self.bandwidth, "bandwidth")
        object.__setattr__(self, "bandwidth", bw)
        object.__setattr__(self, "bandwidth_inv", np.linalg.inv(bw))
        if self.family == "data_driven":
            if self.anchors is None or len(self.anchors) == 0:
                raise ConfigurationError("data_driven kernel requires nonempty anchors")
            object.__setattr__(
                self, "anchors", as_ensemble(self.anchors, "anchors", bw.shape[0])
            )

    @property
    def n_dim(self) -> int:
        return self.bandwidth.shape[0]


def _sq_mahalanobis(x, y, inv, block=512):
    """Pairwise squared distances (x_i - y_j)^T inv (x_i - y_j).

    Computed from explicit differences (in query blocks to bound memory), so
    coincident points give exactly zero even for near-singular bandwidths.
    """
    out = np.empty((x.shape[0], y.shape[0]))
    for start in range(0, x.shape[0], block):
        stop = min(start + block, x.shape[0])
        diff = x[start:stop, None, :] - y[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff @ inv, diff)
    return np.clip(out, 0.0, None)


def _bump_matrix(x, y, inv):
    return np.exp(-0.5 * _sq_mahalanobis(x, y, inv))


def _anchor_sums(spec, x):
    """Per-point sums of the Gaussian bump over the anchor set."""
    return _bump_matrix(x, spec.anchors, spec.bandwidth_inv).sum(axis=1)


def kernel_matrix(spec: KernelSpec, x, y) -> np.ndarray:
    """Kernel values ``k(x_i, y_j)`` as an ``(len(x), len(y))`` matrix."""
    x = as_ensemble(x, "x", spec.n_dim)
    y = as_ensemble(y, "y", spec.n_dim)
    values = _bump_matrix(x, y, spec.bandwidth_inv)
    if spec.family == "data_driven":
        cx = _anchor_sums(spec, x)
        cy = _anchor_sums(spec, y)
        values = values / np.sqrt(np.outer(cx, cy))
    return values


def kernel_value(spec: KernelSpec, x, y) -> float:
    return float(kernel_matrix(spec, np.atleast_2d(x), np.atleast_2d(y))[0, 0])


def kernel_grad_weighted_sum(spec, x, y, coeff, kernel_values=None) -> np.ndarray:
    """``sum_j coeff[i, j] * grad_x k(x_i, y_j)`` for each query point ``x_i``.

    ``coeff`` are arbitrary coefficients (not including the kernel values
    themselves).  Passing precomputed ``kernel_values = kernel_matrix(spec, x, y)``
    avoids recomputation.
    """
    x = as_ensemble(x, "x", spec.n_dim)
    y = as_ensemble(y, "y", spec.n_dim)
    if kernel_values is None:
        kernel_values = kernel_matrix(spec, x, y)
    weighted = np.asarray(coeff, dtype=float) * kernel_values
    row_sum = weighted.sum(axis=1)
    # Gaussian part: -B^{-1} (x_i - y_j) k_ij summed with the coefficients.
    grad = -(row_sum[:, None] * x - weighted @ y) @ spec.bandwidth_inv
    if spec.family == "data_driven":
        # Extra term from the x-dependent anchor normalisation:
        # grad_x ln k gains +0.5 B^{-1} m(x), m(x) the bump-weighted mean of (x - a).
        bumps = _bump_matrix(x, spec.anchors, spec.bandwidth_inv)
        anchor_mean = (bumps @ spec.anchors) / bumps.sum(axis=1)[:, None]
        grad += 0.5 * row_sum[:, None] * ((x - anchor_mean) @ spec.bandwidth_inv)
    return grad


def amise_constants(n_dim: int) -> tuple[float, float]:
    """Dimension-dependent constants of the Gaussian-kernel AMISE bandwidth rule.

    Returns ``(delta, c_delta)`` with ``delta = 1/(n_dim+4)`` and
    ``c_delta = (4/(n_dim+2))**delta``.
    """
    if n_dim < 1:
        raise ConfigurationError(f"n_dim must be >= 1, got {n_dim}")
    delta = 1.0 / (n_dim + 4.0)
    return delta, (4.0 / (n_dim + 2.0)) ** delta


@dataclass(frozen=True, eq=False)
class BandwidthPolicy:
    """How the kernel bandwidth matrix is chosen (and possibly adapted in time).

    Modes
    -----
    fixed_prior
        ``alpha * P0`` with the prior covariance ``P0``.
    adaptive_covariance
        ``alpha * P_t`` with the current ensemble covariance.
    amise_fixed
        ``c_delta / M**delta * diag(P0)``.
    amise_adaptive
        ``c_delta / M**delta * diag(P_t)``, held constant from
        ``freeze_time`` onward when a freeze time is set.
    fixed_matrix
        An explicitly supplied matrix.
    """

    mode: str = "fixed_prior"
    alpha: float = 1.0
    freeze_time: Optional[float] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        check_choice(self.mode, BANDWIDTH_MODES, "mode")
        if self.mode in ("fixed_prior", "adaptive_covariance"):
            check_positive(self.alpha, "alpha")
        if self.freeze_time is not None and self.freeze_time < 0:
            raise ConfigurationError("freeze_time must be >= 0")
        if self.mode == "fixed_matrix":
            if self.matrix is None:
                raise ConfigurationError("fixed_matrix mode requires a matrix")
            object.__setattr__(self, "matrix", as_spd_matrix(self.matrix, "matrix"))

    @property
    def is_adaptive(self) -> bool:
        return self.mode in ("adaptive_covariance", "amise_adaptive")


def bandwidth_matrix(
    policy: BandwidthPolicy,
    prior_cov,
    ens_cov,
    n_particles: int,
    *,
    reg: float = 1e-12,
) -> np.ndarray:
    """Evaluate a bandwidth policy; freeze handling is the caller's job.

    Adds ``reg * trace/n_dim`` to the diagonal whenever some diagonal entry
    falls below ``reg``.  A covariance with zero trace cannot define a
    bandwidth and raises :class:`DegenerateEnsembleError`.
    """
    if policy.mode == "fixed_matrix":
        return np.array(policy.matrix)
    if policy.mode == "fixed_prior":
        base = policy.alpha * np.asarray(prior_cov, dtype=float)
    elif policy.mode == "adaptive_covariance":
        base = policy.alpha * np.asarray(ens_cov, dtype=float)
    else:
        source = prior_cov if policy.mode == "amise_fixed" else ens_cov
        diag = np.diag(np.asarray(source, dtype=float)).copy()
        n_dim = diag.shape[0]
        delta, c_delta = amise_constants(n_dim)
        base = np.diag(c_delta / n_particles**delta * diag)
    base = 0.5 * (base + base.T)
    trace = float(np.trace(base))
    if trace <= 0.0:
        raise DegenerateEnsembleError("ensemble covariance has zero trace")
    if np.diag(base).min() < reg:
        base = base + (reg * trace / base.shape[0]) * np.eye(base.shape[0])
    return base
