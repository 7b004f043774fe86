"""Exception types used across bipflow."""


class BipflowError(Exception):
    """Base class for all bipflow errors."""


class ConfigurationError(BipflowError, ValueError):
    """Invalid configuration, argument, or contract violation."""


class DegenerateEnsembleError(BipflowError, RuntimeError):
    """An ensemble statistic is too degenerate for the requested operation."""


class IsolatedParticleError(BipflowError, RuntimeError):
    """All kernel values around a particle underflowed to zero.

    Usually a sign that the kernel bandwidth is far too small for the
    current particle spread.
    """

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"kernel values underflowed around particle {index}")


class IntegrationError(BipflowError, RuntimeError):
    """Time integration failed; ``t_last`` holds the last finite time."""

    def __init__(self, t_last, message=None):
        self.t_last = t_last
        super().__init__(message or f"integration failed after t = {t_last}")


class UnsupportedSamplingError(BipflowError, RuntimeError):
    """The kernel family does not admit a closed-form sampler."""
