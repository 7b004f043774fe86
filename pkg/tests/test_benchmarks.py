"""Benchmark problems: closed forms, analytic posteriors, solver convergence."""

import numpy as np
import pytest

from bipflow import (
    bimodal_problem,
    darcy1d_problem,
    darcy_solve,
    elliptic2d_problem,
    kl_linear_problem,
    linear_gaussian_problem,
)
from bipflow.benchmarks import expansion_basis, expansion_eigenvalues

from conftest import random_spd


class TestLinearGaussian:
    def test_zero_at_target_mean(self, rng):
        cov = random_spd(rng, 2)
        mean = rng.standard_normal(2)
        prob = linear_gaussian_problem(mean, cov)
        assert prob.regularized_misfit(mean) == pytest.approx(0.0, abs=1e-14)

    def test_gradient_is_precision_times_offset(self, rng):
        cov = random_spd(rng, 3)
        mean = rng.standard_normal(3)
        prob = linear_gaussian_problem(mean, cov)
        for _ in range(5):
            x = rng.standard_normal(3)
            expected = np.linalg.solve(cov, x - mean)
            assert np.allclose(prob.grad_regularized_misfit(x), expected, atol=1e-10)

    def test_analytic_posterior_attached(self, rng):
        cov = random_spd(rng, 2)
        prob = linear_gaussian_problem([1.0, 2.0], cov)
        assert np.allclose(prob.analytic_posterior.mean, [1.0, 2.0])
        assert np.allclose(prob.analytic_posterior.cov, cov)


class TestElliptic2d:
    def test_value_at_origin(self):
        # exp(0) = 1: plain polynomial values at the two observation points
        h = elliptic2d_problem().forward([0.0, 0.0])
        assert np.allclose(h, [0.09375, 0.09375])

    def test_value_at_reference(self):
        h = elliptic2d_problem().forward([0.0865, -0.8157])
        assert np.allclose(h, [-0.11794, -0.52579], atol=5e-6)

    def test_jacobian_second_column_is_location(self, rng):
        prob = elliptic2d_problem()
        for _ in range(5):
            jac = prob.jacobian(rng.standard_normal(2))
            assert np.allclose(jac[:, 1], [0.25, 0.75])


class TestBimodal:
    def test_swap_symmetry(self, rng):
        prob = bimodal_problem()
        for _ in range(10):
            a, b = rng.standard_normal(2)
            assert prob.forward([a, b])[0] == prob.forward([b, a])[0]
            lp = prob.regularized_misfit([a, b]) - prob.regularized_misfit([b, a])
            assert abs(lp) < 1e-14

    def test_misfit_zero_on_data_curves(self):
        prob = bimodal_problem()
        offset = np.sqrt(4.2297)
        assert offset == pytest.approx(2.05663, abs=1e-5)
        for t in (-1.0, 0.0, 2.0):
            assert prob.misfit([t + offset, t]) == pytest.approx(0.0, abs=1e-12)
            assert prob.misfit([t - offset, t]) == pytest.approx(0.0, abs=1e-12)

    def test_posterior_mass_split_by_symmetry(self):
        # quadrature over a symmetric grid: exactly half the mass on each
        # side of the diagonal
        prob = bimodal_problem()
        grid = np.linspace(-6.0, 6.0, 241)
        xx, yy = np.meshgrid(grid, grid, indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        log_post = -prob.misfit_batch(pts) - 0.5 * np.sum(pts**2, axis=1)
        post = np.exp(log_post - log_post.max()).reshape(xx.shape)
        above = post[xx > yy].sum()
        below = post[xx < yy].sum()
        assert abs(above - below) / (above + below) < 1e-10


class TestKlLinear:
    def test_posterior_trace_table(self):
        # reference posterior-spread values of the scaling study
        for n_obs, expected in ((16, 0.396), (64, 0.151), (256, 0.046)):
            prob = kl_linear_problem(4, n_obs)
            assert np.trace(prob.analytic_posterior.cov) == pytest.approx(
                expected, abs=6e-4
            )
        for n_modes, expected in ((6, 0.191), (8, 0.217)):
            prob = kl_linear_problem(n_modes, 64)
            assert np.trace(prob.analytic_posterior.cov) == pytest.approx(
                expected, abs=6e-4
            )

    def test_trace_decreases_with_more_observations(self):
        traces = [
            np.trace(kl_linear_problem(4, n_obs).analytic_posterior.cov)
            for n_obs in (16, 64, 256)
        ]
        assert traces[0] > traces[1] > traces[2]

    def test_posterior_solves_normal_equations(self, rng):
        prob = kl_linear_problem(3, 32, seed=4)
        post = prob.analytic_posterior
        design = prob.jacobian(np.zeros(3))
        noise_var = prob.noise_cov[0, 0]
        lhs = (design.T @ design / noise_var + np.linalg.inv(prob.prior_cov)) @ post.mean
        rhs = design.T @ prob.observation / noise_var
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_truth_seeded_and_recorded(self):
        a = kl_linear_problem(4, 16, seed=3)
        b = kl_linear_problem(4, 16, seed=3)
        c = kl_linear_problem(4, 16, seed=4)
        assert np.array_equal(a.truth, b.truth)
        assert not np.array_equal(a.truth, c.truth)
        assert np.allclose(a.observation, a.forward(a.truth))

    def test_basis_mode_index(self):
        # column k must oscillate with frequency k: distinct columns
        basis = expansion_basis(np.linspace(0.01, 0.99, 50), 3)
        assert np.abs(basis[:, 0] - basis[:, 1]).max() > 0.1
        assert np.abs(np.linalg.matrix_rank(basis) - 3) == 0

    def test_eigenvalues_decrease(self):
        lam = expansion_eigenvalues(8, 1.0)
        assert np.all(np.diff(lam) < 0)
        assert lam[0] == 1.0


class TestDarcySolve:
    def test_zero_field_closed_form(self):
        n = 2**8
        nodes = np.arange(n + 1) / n
        pressure = darcy_solve(np.zeros(n + 1))
        exact = 0.5 * nodes * (1.0 - nodes)
        assert np.abs(pressure - exact).max() < 1e-12  # scheme is exact for -p'' = 1
        assert pressure[n // 2] == pytest.approx(0.125, abs=1e-12)

    def test_constant_field_scaling(self, rng):
        n = 2**6
        base = darcy_solve(np.zeros(n + 1))
        c = 0.7
        scaled = darcy_solve(np.full(n + 1, c))
        assert np.abs(scaled - np.exp(-c) * base).max() < 1e-12

    def test_second_order_convergence(self):
        # manufactured field, refined-grid reference
        def solve_level(level):
            n = 2**level
            nodes = np.arange(n + 1) / n
            return nodes, darcy_solve(np.sin(2 * np.pi * nodes))

        ref_nodes, ref = solve_level(12)
        errors = []
        for level in (6, 7, 8):
            nodes, pressure = solve_level(level)
            stride = 2 ** (12 - level)
            errors.append(np.abs(pressure - ref[::stride]).max())
        assert 3.5 <= errors[0] / errors[1] <= 4.5
        assert 3.5 <= errors[1] / errors[2] <= 4.5

    def test_boundary_values_zero(self, rng):
        pressure = darcy_solve(rng.standard_normal(2**5 + 1))
        assert pressure[0] == 0.0 and pressure[-1] == 0.0


class TestDarcyProblem:
    def test_zero_coefficients_give_parabola(self):
        prob = darcy1d_problem()
        points = np.arange(1, 17) / 16
        expected = 0.5 * points * (1.0 - points)
        assert np.abs(prob.forward(np.zeros(32)) - expected).max() < 1e-12

    def test_single_mode_field(self):
        # only the first coefficient set: the field is one sine mode
        prob = darcy1d_problem()
        n = 2**8
        nodes = np.arange(n + 1) / n
        x = np.zeros(32)
        x[0] = 0.8
        field = expansion_basis(nodes, 32) @ x
        expected = 0.8 * np.sqrt(2 * np.pi) * np.sin(2 * np.pi * nodes)
        assert np.abs(field - expected).max() < 1e-12

    def test_observations_on_grid_nodes(self, rng):
        prob = darcy1d_problem()
        x = rng.standard_normal(32) * 0.1
        n = 2**8
        nodes = np.arange(n + 1) / n
        pressure = darcy_solve(expansion_basis(nodes, 32) @ x)
        obs = prob.forward(x)
        assert np.allclose(obs, pressure[(np.arange(1, 17) * 16)])

    def test_truth_modes_truncated(self):
        prob = darcy1d_problem(seed=5)
        assert np.all(prob.truth[4:] == 0.0)
        assert np.any(prob.truth[:4] != 0.0)

    def test_prior_variances(self):
        prob = darcy1d_problem()
        lam = np.diag(prob.prior_cov)
        assert lam[0] == 1.0
        assert lam[1] == pytest.approx(2.0**-3)
