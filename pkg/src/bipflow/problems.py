"""Bayesian inverse problem definition: forward model, noise model, Gaussian prior.

The central object is :class:`InverseProblem`, which bundles a (possibly
nonlinear) forward map with a Gaussian observation-noise model and a Gaussian
prior, and exposes the data misfit, the prior-regularized misfit, and their
gradients.  All densities are handled unnormalised: the negative log posterior
is identified with the regularized misfit.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .exceptions import ConfigurationError
from .validation import as_spd_matrix, as_vector

_FD_EPS = 1e-6


class InverseProblem:
    """Inverse problem ``y = h(x) + noise`` with Gaussian noise and prior.

    Parameters
    ----------
    forward_map : callable
        Maps a parameter vector of length ``n_params`` to an observation
        vector of length ``n_obs``.  Must be pure (no internal state).
    observation : array_like
        Observed data, length ``n_obs``.
    noise_cov : array_like
        Symmetric positive-definite noise covariance, ``(n_obs, n_obs)``.
    prior_mean : array_like
        Gaussian prior mean, length ``n_params``.
    prior_cov : array_like
        Symmetric positive-definite prior covariance.
    forward_jacobian : callable, optional
        Maps a parameter vector to the ``(n_obs, n_params)`` Jacobian of the
        forward map.  When absent, gradients fall back to central finite
        differences of the forward map.
    forward_map_batch : callable, optional
        Vectorized forward map taking ``(M, n_params)`` to ``(M, n_obs)``.
        Defaults to a row-wise loop over ``forward_map``.
    forward_jacobian_batch : callable, optional
        Vectorized Jacobian taking ``(M, n_params)`` to
        ``(M, n_obs, n_params)``; speeds up batched gradients considerably.
    analytic_posterior : object, optional
        Analytic posterior description (used by benchmark problems that
        admit one, e.g. linear-Gaussian settings).
    truth : array_like, optional
        Reference parameter used to synthesize the data, when known.
    name : str, optional
        Human-readable identifier.

    Instances are immutable after construction and safe for concurrent
    read access.
    """

    def __init__(
        self,
        forward_map: Callable[[np.ndarray], np.ndarray],
        observation,
        noise_cov,
        prior_mean,
        prior_cov,
        forward_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        forward_map_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        forward_jacobian_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        analytic_posterior=None,
        truth=None,
        name: str = "",
    ):
        self.forward_map = forward_map
        self.forward_jacobian = forward_jacobian
        self._forward_map_batch = forward_map_batch
        self._forward_jacobian_batch = forward_jacobian_batch
        self.observation = as_vector(observation, "observation")
        self.noise_cov = as_spd_matrix(noise_cov, "noise_cov")
        self.prior_mean = as_vector(prior_mean, "prior_mean")
        self.prior_cov = as_spd_matrix(prior_cov, "prior_cov")
        self.analytic_posterior = analytic_posterior
        self.truth = None if truth is None else as_vector(truth, "truth")
        self.name = name

        self.n_obs = self.observation.shape[0]
        self.n_params = self.prior_mean.shape[0]
        if self.noise_cov.shape[0] != self.n_obs:
            raise ConfigurationError(
                f"noise_cov has size {self.noise_cov.shape[0]}, observation has {self.n_obs}"
            )
        if self.prior_cov.shape[0] != self.n_params:
            raise ConfigurationError(
                f"prior_cov has size {self.prior_cov.shape[0]}, prior_mean has {self.n_params}"
            )

        # Cached Cholesky factorizations; failure here is a hard error.
        self._noise_chol = cho_factor(self.noise_cov, lower=True)
        self._prior_chol = cho_factor(self.prior_cov, lower=True)
        self._prior_sqrt = np.linalg.cholesky(self.prior_cov)

        out = np.atleast_1d(np.asarray(forward_map(self.prior_mean), dtype=float))
        if out.shape != (self.n_obs,):
            raise ConfigurationError(
                f"forward_map output has shape {out.shape}, expected ({self.n_obs},)"
            )

    # -- forward model -----------------------------------------------------

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.atleast_1d(np.asarray(self.forward_map(x), dtype=float))

    def forward_batch(self, particles) -> np.ndarray:
        """Apply the forward map to each row of ``particles``."""
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        if self._forward_map_batch is not None:
            out = np.asarray(self._forward_map_batch(particles), dtype=float)
            return out.reshape(particles.shape[0], self.n_obs)
        return np.stack([self.forward(x) for x in particles])

    def jacobian(self, x) -> np.ndarray:
        """Jacobian of the forward map, analytic or by central differences."""
        x = as_vector(x, "x", self.n_params)
        if self.forward_jacobian is not None:
            jac = np.asarray(self.forward_jacobian(x), dtype=float)
            return jac.reshape(self.n_obs, self.n_params)
        jac = np.empty((self.n_obs, self.n_params))
        for k in range(self.n_params):
            step = _FD_EPS * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += step
            xm[k] -= step
            jac[:, k] = (self.forward(xp) - self.forward(xm)) / (2 * step)
        return jac

    # -- precision applications --------------------------------------------

    def apply_noise_precision(self, v) -> np.ndarray:
        """R^{-1} v for one residual vector or a stack of them (rows)."""
        v = np.asarray(v, dtype=float)
        return cho_solve(self._noise_chol, v.T, check_finite=False).T

    def apply_prior_precision(self, v) -> np.ndarray:
        """P0^{-1} v for one vector or a stack of them (rows)."""
        v = np.asarray(v, dtype=float)
        return cho_solve(self._prior_chol, v.T, check_finite=False).T

    # -- misfits -----------------------------------------------------------

    def misfit(self, x) -> float:
        """Least-squares data misfit 0.5 * ||y - h(x)||^2 in the noise metric.

        Non-finite forward output propagates into a non-finite value.
        """
        x = as_vector(x, "x", self.n_params)
        residual = self.observation - self.forward(x)
        if not np.all(np.isfinite(residual)):
            return float(np.sum(residual))  # nan/inf propagates
        white = solve_triangular(self._noise_chol[0], residual, lower=True, check_finite=False)
        return 0.5 * float(white @ white)

    def misfit_batch(self, particles) -> np.ndarray:
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        residual = self.observation[None, :] - self.forward_batch(particles)
        white = solve_triangular(self._noise_chol[0], residual.T, lower=True, check_finite=False)
        return 0.5 * np.einsum("ji,ji->i", white, white)

    def prior_term(self, x) -> float:
        x = as_vector(x, "x", self.n_params)
        white = solve_triangular(self._prior_chol[0], x - self.prior_mean, lower=True, check_finite=False)
        return 0.5 * float(white @ white)

    def regularized_misfit(self, x) -> float:
        """Data misfit plus the Gaussian-prior quadratic; the negative log posterior."""
        return self.misfit(x) + self.prior_term(x)

    def log_posterior(self, x) -> float:
        """Unnormalised log posterior density."""
        return -self.regularized_misfit(x)

    # -- gradients ----------------------------------------------------------

    def grad_misfit(self, x) -> np.ndarray:
        x = as_vector(x, "x", self.n_params)
        residual = self.forward(x) - self.observation
        return self.jacobian(x).T @ self.apply_noise_precision(residual)

    def grad_regularized_misfit(self, x) -> np.ndarray:
        x = as_vector(x, "x", self.n_params)
        return self.grad_misfit(x) + self.apply_prior_precision(x - self.prior_mean)

    def grad_regularized_misfit_batch(self, particles) -> np.ndarray:
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        residuals = self.forward_batch(particles) - self.observation
        weighted = self.apply_noise_precision(residuals)
        if self._forward_jacobian_batch is not None:
            jacobians = np.asarray(self._forward_jacobian_batch(particles), dtype=float)
            data_term = np.einsum("ijk,ij->ik", jacobians, weighted)
        else:
            data_term = np.stack(
                [self.jacobian(x).T @ w for x, w in zip(particles, weighted)]
            )
        return data_term + self.apply_prior_precision(particles - self.prior_mean)

    # -- prior sampling -----------------------------------------------------

    def sample_prior(self, n_samples: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n_samples`` i.i.d. parameter vectors from the prior."""
        z = rng.standard_normal((n_samples, self.n_params))
        return self.prior_mean[None, :] + z @ self._prior_sqrt.T

    @property
    def prior_sqrt(self) -> np.ndarray:
        """Lower-triangular Cholesky factor of the prior covariance."""
        return self._prior_sqrt

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return (
            f"<InverseProblem{label}: n_params={self.n_params}, n_obs={self.n_obs}>"
        )
