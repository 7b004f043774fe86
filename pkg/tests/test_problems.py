"""Inverse problem contract: misfits, gradients, validation."""

import numpy as np
import pytest

from bipflow import (
    ConfigurationError,
    InverseProblem,
    bimodal_problem,
    elliptic2d_problem,
    kl_linear_problem,
    linear_gaussian_problem,
)

from conftest import fd_gradient, random_spd


def identity_problem(dim=2):
    return InverseProblem(
        forward_map=lambda x: np.asarray(x, dtype=float),
        observation=np.zeros(dim),
        noise_cov=np.eye(dim),
        prior_mean=np.zeros(dim),
        prior_cov=np.eye(dim),
        forward_jacobian=lambda x: np.eye(dim),
    )


class TestMisfit:
    def test_zero_residual(self):
        prob = identity_problem()
        assert prob.misfit(np.zeros(2)) == 0.0

    def test_bimodal_at_origin(self):
        # residual is the observation itself; plain arithmetic oracle
        expected = 0.5 * 4.2297**2
        assert bimodal_problem().misfit([0.0, 0.0]) == pytest.approx(expected, rel=1e-14)

    def test_elliptic_at_reference_point(self):
        # closed-form solution evaluated independently of the library path
        def pressure(s, x):
            return x[1] * s + np.exp(-x[0]) * (-0.5 * s**2 + 0.5 * s)

        x_ref = np.array([0.0865, -0.8157])
        prob = elliptic2d_problem()
        h_ref = np.array([pressure(0.25, x_ref), pressure(0.75, x_ref)])
        assert np.allclose(h_ref, [-0.11794, -0.52579], atol=5e-6)
        residual = np.array([-0.0173, -0.573]) - h_ref
        expected = 0.5 * residual @ residual / 0.01
        assert prob.misfit(x_ref) == pytest.approx(expected, rel=1e-12)

    def test_nonnegative_on_random_points(self, rng):
        for prob in (bimodal_problem(), elliptic2d_problem(), kl_linear_problem(4, 16)):
            for _ in range(20):
                x = rng.standard_normal(prob.n_params)
                assert prob.misfit(x) >= 0.0
                assert prob.regularized_misfit(x) >= 0.0

    def test_nonfinite_forward_propagates(self):
        prob = InverseProblem(
            forward_map=lambda x: np.array([np.nan]),
            observation=[0.0],
            noise_cov=[[1.0]],
            prior_mean=[0.0],
            prior_cov=[[1.0]],
        )
        assert np.isnan(prob.misfit([0.5]))

    def test_dimension_mismatch_raises(self):
        prob = identity_problem()
        with pytest.raises(ConfigurationError):
            prob.misfit([1.0, 2.0, 3.0])


class TestRegularizedMisfit:
    def test_vanishes_at_prior_mean_with_exact_data(self):
        prob = identity_problem()
        assert prob.regularized_misfit(np.zeros(2)) == 0.0

    def test_quadratic_construction(self, rng):
        # the synthetic quadratic target equals 0.5 ||x||^2 for unit covariance
        prob = linear_gaussian_problem([0.0, 0.0], np.eye(2))
        for _ in range(10):
            x = rng.standard_normal(2)
            assert prob.regularized_misfit(x) == pytest.approx(0.5 * x @ x, rel=1e-12)

    def test_bimodal_value(self):
        expected = 0.5 * (4.2297 - 4.0) ** 2 + 0.5 * 2.0
        got = bimodal_problem().regularized_misfit([1.0, -1.0])
        assert got == pytest.approx(expected, rel=1e-13)

    def test_linear_hessian_constant(self, rng):
        # quadratic target: finite-difference Hessian identical everywhere
        prob = kl_linear_problem(3, 16)

        def hessian(x, step=1e-3):
            h = np.zeros((3, 3))
            for i in range(3):
                for j in range(3):
                    xpp, xpm, xmp, xmm = (x.copy() for _ in range(4))
                    xpp[[i, j]] += step
                    xmm[[i, j]] -= step
                    xpm[i] += step
                    xpm[j] -= step
                    xmp[i] -= step
                    xmp[j] += step
                    h[i, j] = (
                        prob.regularized_misfit(xpp)
                        - prob.regularized_misfit(xpm)
                        - prob.regularized_misfit(xmp)
                        + prob.regularized_misfit(xmm)
                    ) / (4 * step**2)
            return h

        points = [rng.standard_normal(3) for _ in range(3)]
        hessians = [hessian(x) for x in points]
        scale = np.abs(hessians[0]).max()
        for other in hessians[1:]:
            assert np.abs(other - hessians[0]).max() <= 1e-6 * scale


class TestGradient:
    def test_stationary_point_of_linear_problem(self):
        prob = identity_problem()
        assert np.allclose(prob.grad_regularized_misfit(np.zeros(2)), 0.0)

    def test_bimodal_hand_derivative(self):
        # hand differentiation: (h - y) * 2(x1 - x2) * (1, -1) plus prior term
        prob = bimodal_problem()
        x = np.array([1.0, -1.0])
        data_term = (4.0 - 4.2297) * 2 * (x[0] - x[1]) * np.array([1.0, -1.0])
        expected = data_term + x
        assert np.allclose(prob.grad_regularized_misfit(x), expected, rtol=1e-12)

    @pytest.mark.parametrize(
        "factory",
        [bimodal_problem, elliptic2d_problem, lambda: kl_linear_problem(4, 32)],
    )
    def test_matches_finite_differences(self, factory, rng):
        prob = factory()
        for _ in range(100):
            x = rng.standard_normal(prob.n_params)
            grad = prob.grad_regularized_misfit(x)
            fd = fd_gradient(prob.regularized_misfit, x)
            assert np.abs(grad - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())

    def test_fd_jacobian_fallback(self, rng):
        # no analytic Jacobian supplied: gradient still matches the FD oracle
        prob = InverseProblem(
            forward_map=lambda x: np.array([np.sin(x[0]) * x[1], x[0] ** 2]),
            observation=[0.3, 0.1],
            noise_cov=0.5 * np.eye(2),
            prior_mean=np.zeros(2),
            prior_cov=2.0 * np.eye(2),
        )
        for _ in range(20):
            x = rng.standard_normal(2)
            grad = prob.grad_regularized_misfit(x)
            fd = fd_gradient(prob.regularized_misfit, x)
            assert np.abs(grad - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


class TestValidation:
    def test_rejects_indefinite_noise_cov(self):
        with pytest.raises(ConfigurationError):
            InverseProblem(
                forward_map=lambda x: x,
                observation=[0.0],
                noise_cov=[[-1.0]],
                prior_mean=[0.0],
                prior_cov=[[1.0]],
            )

    def test_rejects_asymmetric_prior_cov(self):
        with pytest.raises(ConfigurationError):
            InverseProblem(
                forward_map=lambda x: x,
                observation=[0.0, 0.0],
                noise_cov=np.eye(2),
                prior_mean=[0.0, 0.0],
                prior_cov=[[1.0, 0.5], [0.0, 1.0]],
            )

    def test_rejects_mismatched_forward_output(self):
        with pytest.raises(ConfigurationError):
            InverseProblem(
                forward_map=lambda x: np.zeros(3),
                observation=[0.0, 0.0],
                noise_cov=np.eye(2),
                prior_mean=[0.0],
                prior_cov=[[1.0]],
            )

    def test_prior_sampling_moments(self, rng):
        cov = random_spd(rng, 2)
        prob = InverseProblem(
            forward_map=lambda x: np.asarray(x, dtype=float),
            observation=np.zeros(2),
            noise_cov=np.eye(2),
            prior_mean=[1.0, -2.0],
            prior_cov=cov,
        )
        draws = prob.sample_prior(200_000, rng)
        assert np.allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.03)
        emp = np.cov(draws.T, bias=True)
        assert np.abs(emp - cov).max() <= 0.05 * np.abs(cov).max()
