"""Deterministic interacting-particle flows driven by a smoothed density estimate.

The particle velocity combines the gradient of a kernel-density log estimate
(with a cross-entropy-like second term) and the gradient of the unnormalised
log posterior.  Five variants are supported, crossing the preconditioner
(identity, global ensemble covariance, per-particle localised covariance)
with exact or covariance-substituted ("gradient-free") posterior gradients.

Exact-gradient variants descend the ensemble potential

    V(Z) = sum_i [ ln( (1/M) sum_j k(x_i, x_j) ) + Phi(x_i) ]

with ``Phi`` the regularized misfit; their velocity equals the preconditioned
negative gradient of ``V``, so ``V`` decreases monotonically along exact
trajectories (for a fixed bandwidth).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ensembles import (
    LocalisationConfig,
    cross_covariance,
    ensemble_covariance,
    localisation_weights,
    localised_covariances,
    localised_cross_covariances,
    spread,
)
from .exceptions import (
    ConfigurationError,
    DegenerateEnsembleError,
    IsolatedParticleError,
)
from .integrators import IntegratorConfig, integrate_dopri45
from .kernels import BandwidthPolicy, KernelSpec, bandwidth_matrix, kernel_matrix, kernel_grad_weighted_sum
from .problems import InverseProblem
from .validation import as_ensemble, check_choice

PRECONDITIONERS = ("identity", "global_covariance", "localised_covariance")
GRADIENT_MODES = ("exact", "gradient_free")


@dataclass(frozen=True)
class FlowVariant:
    """Preconditioner and gradient handling of one flow family member."""

    preconditioner: str = "global_covariance"
    gradient_mode: str = "exact"
    localisation: Optional[LocalisationConfig] = None

    def __post_init__(self):
        check_choice(self.preconditioner, PRECONDITIONERS, "preconditioner")
        check_choice(self.gradient_mode, GRADIENT_MODES, "gradient_mode")
        if self.preconditioner == "localised_covariance" and self.localisation is None:
            raise ConfigurationError("localised_covariance requires a localisation config")
        if self.gradient_mode == "gradient_free" and self.preconditioner == "identity":
            raise ConfigurationError(
                "gradient_free mode needs a covariance preconditioner"
            )


def _ensemble_column_sums(spec, particles):
    """Column sums ``s_j = sum_l k(x_l, x_j)`` over the ensemble."""
    return kernel_matrix(spec, particles, particles).sum(axis=0)


def kde_bracket_value(points, particles, spec: KernelSpec) -> np.ndarray:
    """Value of ``ln((1/M) sum_j k(x, x_j)) + sum_j k(x, x_j)/s_j`` per query point.

    The column sums ``s_j`` are taken over the ensemble and held fixed, which
    is also the convention of :func:`kde_log_gradient_terms`.
    """
    points = as_ensemble(points, "points", spec.n_dim)
    particles = as_ensemble(particles, "particles", spec.n_dim)
    col_sums = _ensemble_column_sums(spec, particles)
    kq = kernel_matrix(spec, points, particles)
    row_sums = kq.sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.log(row_sums / particles.shape[0]) + kq @ (1.0 / col_sums)


def kde_log_gradient_terms(points, particles, spec: KernelSpec) -> np.ndarray:
    """Gradient in the query point of the two kernel terms of the drift.

    Analytic for both kernel families.  Raises
    :class:`IsolatedParticleError` when every kernel value around a query
    point underflows to zero.
    """
    points = as_ensemble(points, "points", spec.n_dim)
    particles = as_ensemble(particles, "particles", spec.n_dim)
    col_sums = _ensemble_column_sums(spec, particles)
    kq = kernel_matrix(spec, points, particles)
    row_sums = kq.sum(axis=1)
    if np.any(row_sums == 0.0):
        raise IsolatedParticleError(int(np.argmin(row_sums)))
    coeff = 1.0 / row_sums[:, None] + 1.0 / col_sums[None, :]
    return kernel_grad_weighted_sum(spec, points, particles, coeff, kernel_values=kq)


def drift(points, particles, spec: KernelSpec, problem: InverseProblem) -> np.ndarray:
    """Unpreconditioned flow drift at the query points.

    Minus the kernel terms' gradient minus the gradient of the regularized
    misfit; at a particle this equals minus the potential gradient in that
    particle.
    """
    points = as_ensemble(points, "points", spec.n_dim)
    kde_grad = kde_log_gradient_terms(points, particles, spec)
    return -kde_grad - problem.grad_regularized_misfit_batch(points)


def potential(particles, spec: KernelSpec, problem: InverseProblem) -> float:
    """Ensemble potential (unnormalised; decreases along exact-gradient flows)."""
    particles = as_ensemble(particles, "particles", spec.n_dim)
    n = particles.shape[0]
    row_sums = kernel_matrix(spec, particles, particles).sum(axis=1)
    misfits = np.array([problem.regularized_misfit(x) for x in particles])
    return float(np.sum(np.log(row_sums / n)) + np.sum(misfits))


def flow_rhs(
    variant: FlowVariant,
    particles,
    spec: KernelSpec,
    problem: InverseProblem,
) -> np.ndarray:
    """Ensemble velocity of the selected flow variant, shape ``(M, n_dim)``."""
    particles = as_ensemble(particles, "particles", problem.n_params)
    kde_grad = kde_log_gradient_terms(particles, particles, spec)

    if variant.preconditioner == "localised_covariance":
        weights = localisation_weights(particles, variant.localisation)

    if variant.gradient_mode == "exact":
        velocity = -kde_grad - problem.grad_regularized_misfit_batch(particles)
        if variant.preconditioner == "identity":
            return velocity
        if variant.preconditioner == "global_covariance":
            return velocity @ ensemble_covariance(particles)
        cov = localised_covariances(particles, weights)
        return np.einsum("ikl,il->ik", cov, velocity)

    h_values = problem.forward_batch(particles)
    resid_prec = problem.apply_noise_precision(h_values - problem.observation)
    prior_prec = problem.apply_prior_precision(particles - problem.prior_mean)
    if variant.preconditioner == "global_covariance":
        cov = ensemble_covariance(particles)
        cross = cross_covariance(particles, h_values)
        return -(kde_grad + prior_prec) @ cov - resid_prec @ cross.T
    cov = localised_covariances(particles, weights)
    cross = localised_cross_covariances(particles, h_values, weights)
    pulled = np.einsum("ikl,il->ik", cov, kde_grad + prior_prec)
    data_term = np.einsum("ikl,il->ik", cross, resid_prec)
    return -pulled - data_term


def linear_gaussian_rhs(particles, problem: InverseProblem) -> np.ndarray:
    """Particle velocity of the quadratic-potential interacting system.

    ``-grad Phi(x_i) + P^{-1} (x_i - xbar)`` with the global empirical
    covariance ``P``; requires an ensemble rich enough for ``P`` to be
    invertible.
    """
    particles = as_ensemble(particles, "particles", problem.n_params)
    cov = ensemble_covariance(particles)
    try:
        factor = cho_factor(cov, lower=True)
    except LinAlgError:
        raise DegenerateEnsembleError(
            "ensemble covariance is singular; need M > n_dim in general position"
        ) from None
    centered = particles - particles.mean(axis=0)
    repulsion = cho_solve(factor, centered.T).T
    return -problem.grad_regularized_misfit_batch(particles) + repulsion


@dataclass
class FlowResult:
    """Recorded trajectory diagnostics of one deterministic flow run."""

    times: np.ndarray
    potentials: np.ndarray
    means: np.ndarray
    spreads: np.ndarray
    cov_traces: np.ndarray
    particles: np.ndarray
    status: str
    n_accepted: int
    n_rhs: int
    bandwidth: np.ndarray
    states: Optional[list] = field(default=None, repr=False)


def integrate_flow(
    variant: FlowVariant,
    particles0,
    policy: BandwidthPolicy,
    problem: InverseProblem,
    config: IntegratorConfig,
    *,
    kernel_family: str = "gaussian",
    store_trajectory: bool = False,
    early_stop_window: Optional[float] = None,
    early_stop_tol: Optional[float] = None,
    linear_gaussian: bool = False,
    t_stops=(),
) -> FlowResult:
    """Integrate a flow variant, recording diagnostics on accepted steps.

    The kernel bandwidth follows ``policy``; adaptive policies with a freeze
    time hold the bandwidth fixed from that time on (the integrator lands on
    the freeze time exactly).  With ``early_stop_window`` and
    ``early_stop_tol`` set, integration halts once the recorded potential
    varies by at most the tolerance over the trailing window.

    ``linear_gaussian`` switches to the quadratic-potential interacting
    system (no kernel terms), used for analytic benchmarks.
    """
    particles0 = as_ensemble(particles0, "particles0", problem.n_params)
    n_particles, n_dim = particles0.shape
    anchors = particles0 if kernel_family == "data_driven" else None
    prior_cov = problem.prior_cov

    frozen = {"bandwidth": None}
    freeze_time = policy.freeze_time if policy.is_adaptive else None

    def current_spec(t, particles):
        if frozen["bandwidth"] is not None and (freeze_time is None or t >= freeze_time):
            bw = frozen["bandwidth"]
        else:
            bw = bandwidth_matrix(
                policy, prior_cov, ensemble_covariance(particles), n_particles
            )
        return KernelSpec(bw, family=kernel_family, anchors=anchors)

    if not policy.is_adaptive or (freeze_time is not None and freeze_time <= 0.0):
        # fixed policies never change; a freeze time of zero pins the
        # bandwidth to the initial ensemble
        frozen["bandwidth"] = bandwidth_matrix(
            policy, prior_cov, ensemble_covariance(particles0), n_particles
        )

    def rhs(t, flat):
        ens = flat.reshape(n_particles, n_dim)
        if linear_gaussian:
            return linear_gaussian_rhs(ens, problem).ravel()
        return flow_rhs(variant, ens, current_spec(t, ens), problem).ravel()

    times, potentials, means, spreads_, traces = [], [], [], [], []
    states = [] if store_trajectory else None
    window = deque()
    counter = {"accepted": 0}

    def record(t, ens):
        spec = current_spec(t, ens)
        value = potential(ens, spec, problem)
        times.append(t)
        potentials.append(value)
        means.append(ens.mean(axis=0))
        spreads_.append(spread(ens))
        traces.append(float(np.trace(ensemble_covariance(ens))))
        if states is not None:
            states.append(ens.copy())
        return value

    def callback(t, flat):
        ens = flat.reshape(n_particles, n_dim)
        if (
            freeze_time is not None
            and frozen["bandwidth"] is None
            and t >= freeze_time
        ):
            frozen["bandwidth"] = bandwidth_matrix(
                policy, prior_cov, ensemble_covariance(ens), n_particles
            )
        counter["accepted"] += 1
        if counter["accepted"] % config.record_stride == 0:
            value = record(t, ens)
            if early_stop_window is not None and early_stop_tol is not None:
                window.append((t, value))
                # keep one record older than the window so sparse records
                # (large accepted steps) still span it
                while len(window) > 1 and window[1][0] <= t - early_stop_window:
                    window.popleft()
                if window[-1][0] - window[0][0] >= early_stop_window:
                    values = [v for _, v in window]
                    if max(values) - min(values) <= early_stop_tol:
                        return True
        return False

    record(0.0, particles0)
    stops = list(t_stops)
    if freeze_time is not None and 0.0 < freeze_time < config.t_end:
        stops.append(freeze_time)
    result = integrate_dopri45(
        rhs, 0.0, particles0.ravel(), config, step_callback=callback, t_stops=stops
    )
    final = result.state.reshape(n_particles, n_dim)
    if not times or times[-1] != result.t:
        record(result.t, final)

    final_spec = current_spec(result.t, final)
    return FlowResult(
        times=np.array(times),
        potentials=np.array(potentials),
        means=np.array(means),
        spreads=np.array(spreads_),
        cov_traces=np.array(traces),
        particles=final,
        status=result.status,
        n_accepted=result.n_accepted,
        n_rhs=result.n_rhs,
        bandwidth=final_spec.bandwidth,
        states=states,
    )


class FokkerPlanckFlow(BaseEstimator):
    """Deterministic interacting-particle flow toward a posterior distribution.

    Follows the scikit-learn estimator protocol: all configuration lives in
    ``__init__`` parameters and :meth:`fit` runs the flow on an inverse
    problem, leaving results in trailing-underscore attributes.

    Parameters
    ----------
    preconditioner : {"identity", "global_covariance", "localised_covariance"}
        Matrix multiplying the particle drift.
    gradient_mode : {"exact", "gradient_free"}
        Exact posterior gradients, or the ensemble cross-covariance
        substitution that avoids forward-map derivatives.
    kernel_family : {"gaussian", "data_driven"}
    bandwidth_mode : str
        One of the :class:`~bipflow.kernels.BandwidthPolicy` modes; a
        ``bandwidth`` matrix given explicitly implies ``fixed_matrix``.
    alpha : float
        Scale of the prior/ensemble covariance in the fixed and adaptive
        covariance modes.
    freeze_time : float or None
        Stop adapting the bandwidth at this time (adaptive modes only).
    gamma : float
        Localisation scale (localised preconditioner only).
    localisation_metric : {"prior", "initial"} or array
        Distance metric for localisation weights: prior covariance, the
        initial ensemble covariance, or an explicit SPD matrix.
    n_particles : int
        Ensemble size when no initial ensemble is passed to :meth:`fit`.
    t_end, rel_tol, abs_tol, max_steps, record_stride
        Time-integration controls.
    early_stop_window, early_stop_tol : float or None
        Optional potential-plateau early stopping.
    store_trajectory : bool
        Keep recorded ensemble snapshots in ``trajectory_``.
    random_state : int or None
        Seed for drawing the initial ensemble from the prior.

    Attributes
    ----------
    particles_ : ndarray of shape (M, n_params)
        Final ensemble.
    times_, potentials_, spreads_, cov_traces_ : ndarray
        Diagnostics recorded on accepted steps.
    status_ : str
        ``"completed"``, ``"stopped"`` (plateau) or ``"incomplete"``.
    """

    def __init__(
        self,
        preconditioner="global_covariance",
        gradient_mode="exact",
        kernel_family="gaussian",
        bandwidth_mode="fixed_prior",
        alpha=0.05,
        freeze_time=None,
        bandwidth=None,
        gamma=1.0,
        localisation_metric="prior",
        n_particles=100,
        t_end=10.0,
        rel_tol=1e-3,
        abs_tol=1e-6,
        max_steps=200_000,
        record_stride=1,
        early_stop_window=None,
        early_stop_tol=None,
        store_trajectory=False,
        random_state=None,
    ):
        self.preconditioner = preconditioner
        self.gradient_mode = gradient_mode
        self.kernel_family = kernel_family
        self.bandwidth_mode = bandwidth_mode
        self.alpha = alpha
        self.freeze_time = freeze_time
        self.bandwidth = bandwidth
        self.gamma = gamma
        self.localisation_metric = localisation_metric
        self.n_particles = n_particles
        self.t_end = t_end
        self.rel_tol = rel_tol
        self.abs_tol = abs_tol
        self.max_steps = max_steps
        self.record_stride = record_stride
        self.early_stop_window = early_stop_window
        self.early_stop_tol = early_stop_tol
        self.store_trajectory = store_trajectory
        self.random_state = random_state

    def _localisation(self, problem, particles0):
        if self.preconditioner != "localised_covariance":
            return None
        metric = self.localisation_metric
        if isinstance(metric, str):
            check_choice(metric, ("prior", "initial"), "localisation_metric")
            metric = (
                problem.prior_cov
                if metric == "prior"
                else ensemble_covariance(particles0)
            )
        return LocalisationConfig(gamma=self.gamma, metric=metric)

    def _policy(self):
        if self.bandwidth is not None:
            return BandwidthPolicy(mode="fixed_matrix", matrix=self.bandwidth)
        return BandwidthPolicy(
            mode=self.bandwidth_mode, alpha=self.alpha, freeze_time=self.freeze_time
        )

    def fit(self, problem: InverseProblem, particles0=None):
        """Run the flow on ``problem``; draws the initial ensemble if needed."""
        if particles0 is None:
            rng = np.random.default_rng(self.random_state)
            particles0 = problem.sample_prior(self.n_particles, rng)
        particles0 = as_ensemble(particles0, "particles0", problem.n_params)
        variant = FlowVariant(
            preconditioner=self.preconditioner,
            gradient_mode=self.gradient_mode,
            localisation=self._localisation(problem, particles0),
        )
        config = IntegratorConfig(
            t_end=self.t_end,
            rel_tol=self.rel_tol,
            abs_tol=self.abs_tol,
            max_steps=self.max_steps,
            record_stride=self.record_stride,
        )
        result = integrate_flow(
            variant,
            particles0,
            self._policy(),
            problem,
            config,
            kernel_family=self.kernel_family,
            store_trajectory=self.store_trajectory,
            early_stop_window=self.early_stop_window,
            early_stop_tol=self.early_stop_tol,
        )
        self.variant_ = variant
        self.initial_particles_ = particles0
        self.particles_ = result.particles
        self.times_ = result.times
        self.potentials_ = result.potentials
        self.means_ = result.means
        self.spreads_ = result.spreads
        self.cov_traces_ = result.cov_traces
        self.trajectory_ = result.states
        self.status_ = result.status
        self.n_steps_ = result.n_accepted
        self.bandwidth_ = result.bandwidth
        self.kernel_spec_ = KernelSpec(
            result.bandwidth,
            family=self.kernel_family,
            anchors=particles0 if self.kernel_family == "data_driven" else None,
        )
        return self

    def posterior_density(self):
        """Kernel density estimate built on the final ensemble."""
        check_is_fitted(self, "particles_")
        from .density import PosteriorDensity

        est = PosteriorDensity(
            bandwidth=self.bandwidth_,
            family=self.kernel_family,
            anchors=self.kernel_spec_.anchors,
        )
        return est.fit(self.particles_)
