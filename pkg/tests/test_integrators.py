"""Adaptive Runge-Kutta stepper against closed forms and an independent solver."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from bipflow import ConfigurationError, IntegrationError, IntegratorConfig, integrate_dopri45


def harmonic(t, y):
    return np.array([y[1], -y[0]])


def vanderpol(t, y):
    return np.array([y[1], (1.0 - y[0] ** 2) * y[1] - y[0]])


class TestAccuracy:
    def test_harmonic_oscillator_closed_form(self):
        config = IntegratorConfig(t_end=7.0, rel_tol=1e-9, abs_tol=1e-11)
        result = integrate_dopri45(harmonic, 0.0, np.array([1.0, 0.0]), config)
        assert result.status == "completed"
        exact = np.array([np.cos(7.0), -np.sin(7.0)])
        assert np.abs(result.state - exact).max() < 1e-7

    def test_vanderpol_against_independent_solver(self):
        y0 = np.array([2.0, 0.0])
        config = IntegratorConfig(t_end=10.0, rel_tol=1e-9, abs_tol=1e-11)
        mine = integrate_dopri45(vanderpol, 0.0, y0, config)
        ref = solve_ivp(vanderpol, (0.0, 10.0), y0, rtol=1e-11, atol=1e-13)
        assert np.abs(mine.state - ref.y[:, -1]).max() < 1e-6

    def test_error_decreases_with_tolerance(self):
        y0 = np.array([2.0, 0.0])
        ref = solve_ivp(vanderpol, (0.0, 5.0), y0, rtol=1e-12, atol=1e-13).y[:, -1]
        errors = []
        for rel in (1e-3, 1e-6, 1e-9):
            config = IntegratorConfig(t_end=5.0, rel_tol=rel, abs_tol=rel * 1e-2)
            out = integrate_dopri45(vanderpol, 0.0, y0, config)
            errors.append(np.abs(out.state - ref).max())
        assert errors[0] > errors[1] > errors[2]

    def test_linear_decay(self):
        config = IntegratorConfig(t_end=3.0, rel_tol=1e-10, abs_tol=1e-12)
        result = integrate_dopri45(lambda t, y: -y, 0.0, np.array([1.0]), config)
        assert result.state[0] == pytest.approx(np.exp(-3.0), rel=1e-8)


class TestControls:
    def test_callback_sees_monotone_times_and_can_stop(self):
        seen = []

        def callback(t, y):
            seen.append(t)
            return t > 1.0

        config = IntegratorConfig(t_end=50.0, rel_tol=1e-6, abs_tol=1e-9)
        result = integrate_dopri45(harmonic, 0.0, np.array([1.0, 0.0]), config, callback)
        assert result.status == "stopped"
        assert result.t == seen[-1]
        assert all(np.diff(seen) > 0)
        assert result.t <= 1.5

    def test_t_stops_hit_exactly(self):
        hits = []

        def callback(t, y):
            hits.append(t)
            return False

        config = IntegratorConfig(t_end=2.0, rel_tol=1e-6, abs_tol=1e-9)
        integrate_dopri45(
            harmonic, 0.0, np.array([1.0, 0.0]), config, callback, t_stops=[0.3, 1.1]
        )
        for stop in (0.3, 1.1, 2.0):
            assert stop in hits

    def test_max_steps_flags_incomplete(self):
        config = IntegratorConfig(t_end=100.0, rel_tol=1e-10, abs_tol=1e-12, max_steps=5)
        result = integrate_dopri45(harmonic, 0.0, np.array([1.0, 0.0]), config)
        assert result.status == "incomplete"
        assert result.t < 100.0

    def test_nonfinite_rhs_raises_with_time(self):
        def blows_up(t, y):
            return np.array([1.0 / (0.5 - t)])

        config = IntegratorConfig(t_end=1.0, rel_tol=1e-8, abs_tol=1e-10)
        with pytest.raises(IntegrationError) as err:
            integrate_dopri45(blows_up, 0.0, np.array([0.0]), config)
        assert 0.0 <= err.value.t_last <= 0.5

    def test_rejects_bad_config(self):
        with pytest.raises(ConfigurationError):
            IntegratorConfig(t_end=-1.0)
        with pytest.raises(ConfigurationError):
            IntegratorConfig(t_end=1.0, rel_tol=0.0)

    def test_deterministic(self):
        config = IntegratorConfig(t_end=4.0, rel_tol=1e-6, abs_tol=1e-9)
        a = integrate_dopri45(vanderpol, 0.0, np.array([2.0, 0.0]), config)
        b = integrate_dopri45(vanderpol, 0.0, np.array([2.0, 0.0]), config)
        assert a.t == b.t
        assert np.array_equal(a.state, b.state)
        assert a.n_accepted == b.n_accepted
