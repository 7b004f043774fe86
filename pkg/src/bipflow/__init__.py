"""Interacting particle flows and samplers for Bayesian inverse problems."""

from .benchmarks import (
    GaussianPosterior,
    bimodal_problem,
    darcy1d_problem,
    darcy_solve,
    elliptic2d_problem,
    kl_linear_problem,
    linear_gaussian_problem,
)
from .density import PosteriorDensity, ensemble_diagnostics, variational_derivative
from .ensembles import (
    LocalisationConfig,
    cross_covariance,
    divergence_correction,
    divergence_correction_localised,
    ensemble_covariance,
    ensemble_mean,
    grad_localisation_weights,
    localisation_weights,
    localised_covariances,
    localised_cross_covariances,
    localised_means,
    psd_sqrt,
    spread,
)
from .exceptions import (
    BipflowError,
    ConfigurationError,
    DegenerateEnsembleError,
    IntegrationError,
    IsolatedParticleError,
    UnsupportedSamplingError,
)
from .flows import (
    FlowVariant,
    FokkerPlanckFlow,
    drift,
    flow_rhs,
    integrate_flow,
    kde_log_gradient_terms,
    linear_gaussian_rhs,
    potential,
)
from .integrators import IntegratorConfig, integrate_dopri45
from .kernels import (
    BandwidthPolicy,
    KernelSpec,
    amise_constants,
    bandwidth_matrix,
    kernel_matrix,
    kernel_value,
)
from .langevin import (
    LangevinSampler,
    SamplerVariant,
    StepConfig,
    adaptive_dt,
    run_sampler,
    sde_diffusion_apply,
    sde_drift,
)
from .problems import InverseProblem
from .smc import (
    PCNSampler,
    SmcConfig,
    TemperedSMC,
    ess,
    pcn_run,
    resample_multinomial,
    resample_systematic,
    smc_run,
    tempered_log_increment,
)

__version__ = "0.1.0"

__all__ = [
    "BandwidthPolicy",
    "BipflowError",
    "ConfigurationError",
    "DegenerateEnsembleError",
    "FlowVariant",
    "FokkerPlanckFlow",
    "GaussianPosterior",
    "IntegrationError",
    "IntegratorConfig",
    "InverseProblem",
    "IsolatedParticleError",
    "KernelSpec",
    "LangevinSampler",
    "LocalisationConfig",
    "PCNSampler",
    "PosteriorDensity",
    "SamplerVariant",
    "SmcConfig",
    "StepConfig",
    "TemperedSMC",
    "UnsupportedSamplingError",
    "adaptive_dt",
    "amise_constants",
    "bandwidth_matrix",
    "bimodal_problem",
    "cross_covariance",
    "darcy1d_problem",
    "darcy_solve",
    "divergence_correction",
    "divergence_correction_localised",
    "drift",
    "elliptic2d_problem",
    "ensemble_covariance",
    "ensemble_diagnostics",
    "ensemble_mean",
    "ess",
    "flow_rhs",
    "grad_localisation_weights",
    "integrate_dopri45",
    "integrate_flow",
    "kde_log_gradient_terms",
    "kernel_matrix",
    "kernel_value",
    "kl_linear_problem",
    "linear_gaussian_problem",
    "linear_gaussian_rhs",
    "localisation_weights",
    "localised_covariances",
    "localised_cross_covariances",
    "localised_means",
    "pcn_run",
    "potential",
    "psd_sqrt",
    "resample_multinomial",
    "resample_systematic",
    "run_sampler",
    "sde_diffusion_apply",
    "sde_drift",
    "smc_run",
    "spread",
    "tempered_log_increment",
    "variational_derivative",
]
