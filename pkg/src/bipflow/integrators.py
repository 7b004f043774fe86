"""Adaptive embedded Runge-Kutta time stepping (Dormand-Prince 5(4)).

A single explicit integrator drives all deterministic particle flows.  It
uses the classic seven-stage Dormand-Prince pair with the first-same-as-last
property and a PI step-size controller on mixed absolute/relative error.
Everything is plain ``float64`` arithmetic with a fixed reduction order, so
results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, IntegrationError
from .validation import check_positive

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# Difference between the 5th- and embedded 4th-order weights.
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_BETA1 = 0.7 / 5  # PI controller exponents
_BETA2 = 0.4 / 5


@dataclass
class IntegratorConfig:
    """Tolerances and bookkeeping limits for :func:`integrate_dopri45`."""

    t_end: float
    rel_tol: float = 1e-3
    abs_tol: float = 1e-6
    max_steps: int = 200_000
    record_stride: int = 1

    def __post_init__(self):
        check_positive(self.t_end, "t_end")
        check_positive(self.rel_tol, "rel_tol")
        check_positive(self.abs_tol, "abs_tol")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.record_stride < 1:
            raise ConfigurationError("record_stride must be >= 1")


@dataclass
class IntegrationResult:
    t: float
    state: np.ndarray
    status: str  # "completed" | "incomplete" | "stopped"
    n_accepted: int = 0
    n_rejected: int = 0
    n_rhs: int = 0
    stop_times: list = field(default_factory=list)


def _error_norm(error, state_old, state_new, rel_tol, abs_tol):
    scale = abs_tol + rel_tol * np.maximum(np.abs(state_old), np.abs(state_new))
    return float(np.sqrt(np.mean((error / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, t_end, rel_tol, abs_tol):
    """Cheap two-evaluation guess for the first step size."""
    scale = abs_tol + rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t_end - t0)
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_end - t0)


def integrate_dopri45(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    state0: np.ndarray,
    config: IntegratorConfig,
    step_callback: Optional[Callable[[float, np.ndarray], bool]] = None,
    t_stops: Sequence[float] = (),
) -> IntegrationResult:
    """Advance ``d state / dt = rhs(t, state)`` from ``t0`` to ``config.t_end``.

    Parameters
    ----------
    rhs : callable
        Right-hand side on flat state vectors.
    step_callback : callable, optional
        Invoked after every accepted step with ``(t, state)``.  A truthy
        return value stops the integration early (status ``"stopped"``).
    t_stops : sequence of float, optional
        Times the integrator must land on exactly (always includes
        ``t_end``).  Useful for comparing trajectories at matched times and
        for bandwidth freezing.

    Returns
    -------
    IntegrationResult
        Final time and state; status ``"incomplete"`` when ``max_steps`` ran
        out before ``t_end``.

    Raises
    ------
    IntegrationError
        When the state or right-hand side becomes non-finite and no step
        size reduction helps; carries the last good time.
    """
    t = float(t0)
    y = np.array(state0, dtype=float).ravel()
    t_end = float(config.t_end)
    if t_end <= t:
        raise ConfigurationError("t_end must exceed the initial time")

    stops = sorted({float(s) for s in t_stops if t < float(s) < t_end} | {t_end})
    stop_idx = 0

    f0 = np.asarray(rhs(t, y), dtype=float).ravel()
    n_rhs = 1
    if not np.all(np.isfinite(f0)):
        raise IntegrationError(t, "right-hand side not finite at the initial state")
    h = _initial_step(rhs, t, y, f0, t_end, config.rel_tol, config.abs_tol)
    n_rhs += 1

    k = np.empty((7, y.size))
    f_current = f0  # FSAL: rhs at the current accepted state
    err_prev = 1e-4
    n_accepted = 0
    n_rejected = 0
    just_rejected = False
    h_min_floor = 1e-14

    while t < t_end - 1e-14 * max(1.0, abs(t_end)):
        if n_accepted + n_rejected >= config.max_steps:
            return IntegrationResult(
                t, y, "incomplete", n_accepted, n_rejected, n_rhs, stops[:stop_idx]
            )
        target = stops[stop_idx]
        h = min(h, target - t)
        h_min = h_min_floor * max(abs(t), 1.0)
        if h < h_min:
            raise IntegrationError(t, f"step size underflow (h = {h:.3e})")

        k[0] = f_current
        bad = False
        for stage in range(1, 7):
            y_stage = y + h * (k[:stage].T @ _A[stage])
            k[stage] = rhs(t + _C[stage] * h, y_stage)
            n_rhs += 1
            if not np.all(np.isfinite(k[stage])):
                bad = True
                break
        if not bad:
            y_new = y + h * (k.T @ _B5)
            error = h * (k.T @ _E)
            bad = not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(error)))
        if bad:
            n_rejected += 1
            just_rejected = True
            h *= _MIN_FACTOR
            continue

        err = _error_norm(error, y, y_new, config.rel_tol, config.abs_tol)
        if err <= 1.0:
            t_new = t + h
            if abs(t_new - target) <= 1e-12 * max(1.0, abs(target)):
                t_new = target
                if stop_idx < len(stops) - 1:
                    stop_idx += 1
            t, y = t_new, y_new
            f_current = k[6]  # stage 7 is the rhs at the new state
            n_accepted += 1
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = min(
                    _MAX_FACTOR,
                    max(_MIN_FACTOR, _SAFETY * err**-_BETA1 * err_prev**_BETA2),
                )
            if just_rejected:
                # no growth right after a rejection; damps oscillation at
                # stability cliffs (sharp nonlinearities under loose tolerance)
                factor = min(factor, 1.0)
                just_rejected = False
            err_prev = max(err, 1e-4)
            h *= factor
            if step_callback is not None and step_callback(t, y):
                return IntegrationResult(
                    t, y, "stopped", n_accepted, n_rejected, n_rhs, stops[:stop_idx]
                )
        else:
            n_rejected += 1
            just_rejected = True
            h *= min(1.0, max(_MIN_FACTOR, _SAFETY * err**-0.2))

    return IntegrationResult(
        t, y, "completed", n_accepted, n_rejected, n_rhs, stops[:stop_idx]
    )
