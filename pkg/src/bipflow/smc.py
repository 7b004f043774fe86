"""Tempered sequential Monte Carlo with ensemble-Langevin mutations, plus a
preconditioned Crank-Nicolson random-walk reference sampler.

The SMC sampler moves a weighted prior ensemble to the posterior through
``N`` uniform likelihood-tempering stages: each stage multiplies the weights
by ``exp(-misfit/N)`` (so the product over all stages recovers the full
likelihood), resamples when the effective sample size drops below a
threshold, and mutates the particles with a short burst of interacting
Langevin dynamics whose data-misfit drift is scaled by the current
temperature ``n/N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .ensembles import LocalisationConfig, ensemble_covariance, spread
from .exceptions import ConfigurationError, IntegrationError
from .langevin import SamplerVariant, _step_terms, step_normals
from .problems import InverseProblem
from .validation import as_ensemble, check_choice, check_positive

RESAMPLING_SCHEMES = ("multinomial", "systematic")


@dataclass
class SmcConfig:
    """Stage schedule, resampling threshold, and mutation step control."""

    n_stages: int = 250
    stage_duration: float = 0.002
    ess_threshold: Optional[float] = None  # defaults to M/2 at run time
    resampling: str = "multinomial"
    safety: float = 0.1
    dt_max: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 1:
            raise ConfigurationError("n_stages must be >= 1")
        check_positive(self.stage_duration, "stage_duration")
        check_choice(self.resampling, RESAMPLING_SCHEMES, "resampling")


def tempered_log_increment(x, problem: InverseProblem, stage: int, n_stages: int) -> float:
    """Log weight increment of one tempering stage: ``-misfit(x)/n_stages``.

    Identical for every stage, so the product of the ``n_stages`` stage
    factors is the full likelihood ``exp(-misfit(x))``.
    """
    if not 1 <= stage <= n_stages:
        raise ConfigurationError(f"stage must lie in [1, {n_stages}], got {stage}")
    return -problem.misfit(x) / n_stages


def ess(weights) -> float:
    """Effective sample size ``1 / sum w_i^2`` of normalized weights."""
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights**2))


def _normalized(log_weights):
    log_weights = log_weights - log_weights.max()
    weights = np.exp(log_weights)
    return weights / weights.sum()


def resample_multinomial(particles, weights, rng: np.random.Generator):
    """Multinomial resampling; returns the new ensemble and the chosen indices."""
    particles = as_ensemble(particles)
    idx = rng.choice(particles.shape[0], size=particles.shape[0], p=weights)
    return particles[idx], idx


def resample_systematic(particles, weights, rng: np.random.Generator):
    """Systematic resampling with a single uniform offset."""
    particles = as_ensemble(particles)
    n = particles.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(weights), positions)
    idx = np.clip(idx, 0, n - 1)
    return particles[idx], idx


@dataclass
class SmcResult:
    particles: np.ndarray
    weights: np.ndarray
    ess_trace: np.ndarray  # ESS after each stage's weight update
    post_resample_ess: np.ndarray  # ESS after the conditional resampling step
    spread_trace: np.ndarray
    resampled: np.ndarray
    n_mutation_steps: int


def smc_run(
    problem: InverseProblem,
    particles0,
    variant: SamplerVariant,
    config: SmcConfig,
) -> SmcResult:
    """Run the tempered SMC loop and return the final weighted ensemble.

    Per stage ``n``: weight update, ESS check with conditional resampling,
    then mutation by Euler-Maruyama steps of the variant's dynamics with the
    data-misfit drift scaled by ``n / n_stages``.  Resampling uses a
    dedicated generator seeded from ``config.seed``; mutation noise comes
    from the counter-based per-step stream shared with the plain samplers.
    """
    particles = as_ensemble(particles0, "particles0", problem.n_params).copy()
    n_particles = particles.shape[0]
    threshold = config.ess_threshold
    if threshold is None:
        threshold = n_particles / 2.0
    if not 1 <= threshold <= n_particles:
        raise ConfigurationError("ess_threshold must lie in [1, M]")
    resample = (
        resample_multinomial if config.resampling == "multinomial" else resample_systematic
    )
    rng = np.random.default_rng(config.seed)

    log_weights = np.zeros(n_particles)
    ess_trace, post_resample_ess, spread_trace, resampled = [], [], [], []
    global_step = 0

    for stage in range(1, config.n_stages + 1):
        log_weights = log_weights - problem.misfit_batch(particles) / config.n_stages
        weights = _normalized(log_weights)
        current_ess = ess(weights)
        ess_trace.append(current_ess)

        did_resample = current_ess < threshold
        if did_resample:
            particles, _ = resample(particles, weights, rng)
            weights = np.full(n_particles, 1.0 / n_particles)
            log_weights = np.zeros(n_particles)
        resampled.append(did_resample)
        post_resample_ess.append(ess(weights))

        scale = stage / config.n_stages
        t_local = 0.0
        while t_local < config.stage_duration - 1e-15:
            terms = _step_terms(variant, particles, problem, drift_scale=scale)
            beta = float(np.sqrt((terms.base * terms.base).sum(axis=1)).max())
            dt = min(config.safety / max(beta, 1e-12), config.dt_max)
            dt = min(dt, config.stage_duration - t_local)
            draws = step_normals(config.seed, global_step, n_particles, problem.n_params)
            if terms.root_is_stack:
                noise = np.einsum("ikl,il->ik", terms.root, draws)
            else:
                noise = draws @ terms.root
            particles = (
                particles
                + (terms.base + terms.correction) * dt
                + np.sqrt(2.0 * dt) * noise
            )
            if not np.all(np.isfinite(particles)):
                raise IntegrationError(
                    t_local, f"SMC mutation diverged at stage {stage}"
                )
            t_local += dt
            global_step += 1
        spread_trace.append(spread(particles))

    return SmcResult(
        particles=particles,
        weights=weights,
        ess_trace=np.array(ess_trace),
        post_resample_ess=np.array(post_resample_ess),
        spread_trace=np.array(spread_trace),
        resampled=np.array(resampled, dtype=bool),
        n_mutation_steps=global_step,
    )


@dataclass
class PcnResult:
    chain: np.ndarray
    acceptance_rate: float
    n_accepted: int


def pcn_run(
    problem: InverseProblem,
    x0,
    step_size: float,
    n_steps: int,
    seed: int = 0,
) -> PcnResult:
    """Random-walk Metropolis with a prior-reversible Crank-Nicolson proposal.

    Proposals ``xbar + sqrt(1-s^2) (x - xbar) + s * P0^{1/2} z`` leave the
    prior invariant, so the accept ratio uses the data misfit only.  Returns
    the chain (initial state included) and the empirical acceptance rate.
    """
    if not 0.0 < step_size <= 1.0:
        raise ConfigurationError(f"step_size must lie in (0, 1], got {step_size}")
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    x = np.array(x0, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    mean = problem.prior_mean
    root = problem.prior_sqrt
    contraction = np.sqrt(1.0 - step_size**2)

    chain = np.empty((n_steps + 1, problem.n_params))
    chain[0] = x
    misfit = problem.misfit(x)
    n_accepted = 0
    for k in range(1, n_steps + 1):
        proposal = mean + contraction * (x - mean) + step_size * (
            root @ rng.standard_normal(problem.n_params)
        )
        proposal_misfit = problem.misfit(proposal)
        if np.log(rng.random()) < misfit - proposal_misfit:
            x, misfit = proposal, proposal_misfit
            n_accepted += 1
        chain[k] = x
    return PcnResult(chain, n_accepted / n_steps, n_accepted)


class TemperedSMC(BaseEstimator):
    """Tempered SMC sampler with ensemble-Langevin mutations.

    Attributes after :meth:`fit`: ``particles_``, ``weights_``,
    ``ess_trace_``, ``spread_trace_``, ``resampled_``, ``posterior_mean_``.
    """

    def __init__(
        self,
        kind="gradient_free_corrected",
        gamma=1.0,
        localisation_metric="prior",
        n_stages=250,
        stage_duration=0.002,
        ess_threshold=None,
        resampling="multinomial",
        safety=0.1,
        dt_max=0.1,
        n_particles=512,
        random_state=None,
    ):
        self.kind = kind
        self.gamma = gamma
        self.localisation_metric = localisation_metric
        self.n_stages = n_stages
        self.stage_duration = stage_duration
        self.ess_threshold = ess_threshold
        self.resampling = resampling
        self.safety = safety
        self.dt_max = dt_max
        self.n_particles = n_particles
        self.random_state = random_state

    def fit(self, problem: InverseProblem, particles0=None):
        seed = self.random_state
        if seed is None:
            seed = int(np.random.default_rng().integers(2**63))
        rng = np.random.default_rng(seed)
        if particles0 is None:
            particles0 = problem.sample_prior(self.n_particles, rng)
        particles0 = as_ensemble(particles0, "particles0", problem.n_params)
        localisation = None
        if self.kind == "localised_gradient_free_corrected":
            metric = self.localisation_metric
            if isinstance(metric, str):
                check_choice(metric, ("prior", "initial"), "localisation_metric")
                metric = (
                    problem.prior_cov
                    if metric == "prior"
                    else ensemble_covariance(particles0)
                )
            localisation = LocalisationConfig(gamma=self.gamma, metric=metric)
        variant = SamplerVariant(kind=self.kind, localisation=localisation)
        config = SmcConfig(
            n_stages=self.n_stages,
            stage_duration=self.stage_duration,
            ess_threshold=self.ess_threshold,
            resampling=self.resampling,
            safety=self.safety,
            dt_max=self.dt_max,
            seed=seed,
        )
        result = smc_run(problem, particles0, variant, config)
        self.initial_particles_ = particles0
        self.particles_ = result.particles
        self.weights_ = result.weights
        self.ess_trace_ = result.ess_trace
        self.post_resample_ess_ = result.post_resample_ess
        self.spread_trace_ = result.spread_trace
        self.resampled_ = result.resampled
        self.posterior_mean_ = result.weights @ result.particles
        return self


class PCNSampler(BaseEstimator):
    """Preconditioned Crank-Nicolson Metropolis sampler.

    Attributes after :meth:`fit`: ``chain_``, ``acceptance_rate_``,
    ``samples_`` (post burn-in, thinned).
    """

    def __init__(self, step_size=0.07, n_steps=10_000, burn_in=0, thin=1, random_state=None):
        self.step_size = step_size
        self.n_steps = n_steps
        self.burn_in = burn_in
        self.thin = thin
        self.random_state = random_state

    def fit(self, problem: InverseProblem, x0=None):
        seed = self.random_state
        if seed is None:
            seed = int(np.random.default_rng().integers(2**63))
        if x0 is None:
            x0 = problem.sample_prior(1, np.random.default_rng(seed ^ 0x5DEECE66D))[0]
        result = pcn_run(problem, x0, self.step_size, self.n_steps, seed=seed)
        self.chain_ = result.chain
        self.acceptance_rate_ = result.acceptance_rate
        self.samples_ = result.chain[self.burn_in :: self.thin]
        return self
