"""Posterior reconstruction from equilibrated particles.

An equilibrated particle ensemble represents the posterior through a kernel
density estimate with an exponential reweighting term,

    log pi_hat(x) = ln( (1/M) sum_i k(x, x_i) ) + sum_j k(x, x_j) / s_j + const,

where ``s_j`` are the kernel column sums over the ensemble.  For the Gaussian
kernel family the estimate can be sampled exactly: draw around each particle
and importance-weight the draws with the exponential term.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ensembles import ensemble_covariance, ensemble_mean, spread
from .exceptions import ConfigurationError, UnsupportedSamplingError
from .flows import kde_bracket_value, potential
from .kernels import KernelSpec, kernel_matrix
from .problems import InverseProblem
from .validation import as_ensemble


class PosteriorDensity(BaseEstimator):
    """Kernel density estimate with exponential reweighting over an ensemble.

    Parameters
    ----------
    bandwidth : array_like
        SPD kernel bandwidth matrix.
    family : {"gaussian", "data_driven"}
    anchors : array_like, optional
        Anchor points of the data-driven family.

    After :meth:`fit`, ``score_samples`` evaluates the unnormalised log
    density and :meth:`sample` draws importance-weighted samples (Gaussian
    family only).
    """

    def __init__(self, bandwidth=None, family="gaussian", anchors=None):
        self.bandwidth = bandwidth
        self.family = family
        self.anchors = anchors

    def fit(self, particles, y=None):
        """Cache the ensemble and the kernel column sums ``s_j``."""
        if self.bandwidth is None:
            raise ConfigurationError("PosteriorDensity requires a bandwidth matrix")
        particles = as_ensemble(particles, "particles")
        spec = KernelSpec(
            np.asarray(self.bandwidth, dtype=float),
            family=self.family,
            anchors=self.anchors,
        )
        self.particles_ = particles
        self.spec_ = spec
        self.column_sums_ = kernel_matrix(spec, particles, particles).sum(axis=0)
        if np.any(self.column_sums_ <= 0.0):
            raise ConfigurationError("kernel column sums must be positive")
        return self

    def score_samples(self, points) -> np.ndarray:
        """Unnormalised log density at each query point (-inf far from all particles)."""
        check_is_fitted(self, "particles_")
        points = as_ensemble(points, "points", self.spec_.n_dim)
        return kde_bracket_value(points, self.particles_, self.spec_)

    def sample(self, n_per_particle: int = 1, random_state=None):
        """Draw ``M * n_per_particle`` samples with importance weights.

        Each particle contributes ``n_per_particle`` Gaussian draws with the
        kernel bandwidth as covariance; the weight of a draw ``x`` is
        proportional to ``exp(sum_j k(x, x_j)/s_j)``, normalized over all
        draws.  The data-driven family has no closed-form sampler.
        """
        check_is_fitted(self, "particles_")
        if self.spec_.family != "gaussian":
            raise UnsupportedSamplingError(
                f"no closed-form sampler for the {self.spec_.family!r} kernel family"
            )
        rng = np.random.default_rng(random_state)
        particles = self.particles_
        n, d = particles.shape
        root = np.linalg.cholesky(self.spec_.bandwidth)
        draws = rng.standard_normal((n * n_per_particle, d))
        samples = np.repeat(particles, n_per_particle, axis=0) + draws @ root.T
        log_w = kernel_matrix(self.spec_, samples, particles) @ (1.0 / self.column_sums_)
        log_w -= log_w.max()
        weights = np.exp(log_w)
        weights /= weights.sum()
        self.sample_ess_ = float(1.0 / np.sum(weights**2))
        return samples, weights


def variational_derivative(points, particles, spec: KernelSpec, problem: InverseProblem):
    """Discrete variational derivative driving the flow, up to a constant.

    ``ln pi_tilde(x) + Phi(x) + sum_j k(x, x_j)/s_j`` per query point; its
    gradient is minus the flow drift, and it is nearly constant across an
    equilibrated ensemble.
    """
    points = as_ensemble(points, "points", spec.n_dim)
    bracket = kde_bracket_value(points, particles, spec)
    misfits = np.array([problem.regularized_misfit(x) for x in points])
    return bracket + misfits


def ensemble_diagnostics(particles, spec=None, problem=None) -> dict:
    """Scalar run diagnostics: spread, mean, covariance trace, optional potential."""
    particles = as_ensemble(particles)
    out = {
        "spread": spread(particles),
        "mean": ensemble_mean(particles),
        "cov_trace": float(np.trace(ensemble_covariance(particles))),
    }
    if spec is not None and problem is not None:
        out["potential"] = potential(particles, spec, problem)
    return out


def grid_axes(bounds, shape):
    """Uniform per-dimension grid axes from (lower, upper) bounds."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    shape = np.broadcast_to(np.asarray(shape, dtype=int), (bounds.shape[0],))
    return [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(bounds, shape)]


def evaluate_log_density_grid(estimate: PosteriorDensity, bounds, shape):
    """Evaluate the log density on a tensor grid (1-D or 2-D).

    Returns ``(axes, log_density)`` with the density array shaped like the
    grid.
    """
    axes = grid_axes(bounds, shape)
    if len(axes) == 1:
        points = axes[0][:, None]
        return axes, estimate.score_samples(points)
    if len(axes) == 2:
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        points = np.column_stack([xx.ravel(), yy.ravel()])
        return axes, estimate.score_samples(points).reshape(xx.shape)
    raise ConfigurationError("grid evaluation supports 1-D and 2-D only")


def normalize_grid_density(log_density, axes):
    """Exponentiate and normalize a log-density grid by trapezoidal quadrature."""
    log_density = np.asarray(log_density, dtype=float)
    density = np.exp(log_density - log_density.max())
    mass = density
    for axis, grid in reversed(list(enumerate(axes))):
        mass = np.trapezoid(mass, x=grid, axis=axis)
    return density / mass


def write_grid_csv(path, axes, log_density):
    """Write grid coordinates and log density values as CSV for plotting."""
    log_density = np.asarray(log_density, dtype=float)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if len(axes) == 1:
            fh.write("x_1,log_density\n")
            for x, val in zip(axes[0], log_density):
                fh.write(f"{x:.17g},{val:.17g}\n")
        else:
            fh.write("x_1,x_2,log_density\n")
            for i, x in enumerate(axes[0]):
                for j, y in enumerate(axes[1]):
                    fh.write(f"{x:.17g},{y:.17g},{log_density[i, j]:.17g}\n")
