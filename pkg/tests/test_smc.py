"""Tempered SMC: weights, resampling, consistency; pCN reference sampler."""

import numpy as np
import pytest

from bipflow import (
    ConfigurationError,
    InverseProblem,
    PCNSampler,
    SamplerVariant,
    SmcConfig,
    TemperedSMC,
    ess,
    kl_linear_problem,
    pcn_run,
    resample_multinomial,
    resample_systematic,
    smc_run,
    tempered_log_increment,
)


def pure_prior_problem(dim=2):
    """Constant forward map with matching data: the misfit vanishes identically."""
    return InverseProblem(
        forward_map=lambda x: np.zeros(1),
        observation=[0.0],
        noise_cov=[[1.0]],
        prior_mean=np.zeros(dim),
        prior_cov=np.eye(dim),
    )


class TestTemperedIncrement:
    def test_zero_for_exact_data(self):
        prob = kl_linear_problem(3, 16)
        assert tempered_log_increment(prob.truth, prob, 1, 10) == pytest.approx(0.0, abs=1e-20)

    def test_stages_telescope_to_full_likelihood(self, rng):
        prob = kl_linear_problem(4, 32)
        for _ in range(10):
            x = rng.standard_normal(4)
            total = sum(tempered_log_increment(x, prob, n, 25) for n in range(1, 26))
            assert total == pytest.approx(-prob.misfit(x), rel=1e-10)

    def test_stage_bounds_checked(self):
        prob = kl_linear_problem(2, 8)
        with pytest.raises(ConfigurationError):
            tempered_log_increment(np.zeros(2), prob, 0, 10)
        with pytest.raises(ConfigurationError):
            tempered_log_increment(np.zeros(2), prob, 11, 10)


class TestEss:
    def test_uniform(self):
        assert ess(np.full(512, 1 / 512)) == pytest.approx(512.0)

    def test_degenerate(self):
        weights = np.zeros(64)
        weights[3] = 1.0
        assert ess(weights) == pytest.approx(1.0)

    def test_direct_value(self):
        assert ess([0.5, 0.25, 0.25]) == pytest.approx(1 / 0.375, rel=1e-12)


class TestResampling:
    def test_single_atom(self, rng):
        particles = np.arange(8.0)[:, None]
        weights = np.zeros(8)
        weights[5] = 1.0
        out, idx = resample_multinomial(particles, weights, np.random.default_rng(0))
        assert np.all(out == 5.0)
        assert np.all(idx == 5)

    def test_multinomial_counts(self):
        # one large resample: empirical counts agree with the weights
        n = 100_000
        particles = np.tile([0.0, 1.0, 2.0, 3.0], n // 4)[:, None]
        weights = np.tile([0.4, 0.3, 0.2, 0.1], n // 4)
        weights = weights / weights.sum()
        out, idx = resample_multinomial(particles, weights, np.random.default_rng(1))
        for value, prob in ((0.0, 0.4), (1.0, 0.3), (2.0, 0.2), (3.0, 0.1)):
            count = np.sum(out[:, 0] == value)
            expected = n * prob
            sigma = np.sqrt(n * prob * (1 - prob))
            assert abs(count - expected) < 4 * sigma

    def test_systematic_counts(self):
        particles = np.arange(4.0)[:, None]
        weights = np.array([0.4, 0.3, 0.2, 0.1])
        out, idx = resample_systematic(particles, weights, np.random.default_rng(2))
        # systematic resampling keeps counts within one of n * w
        counts = np.bincount(idx, minlength=4)
        assert np.all(np.abs(counts - 4 * weights) <= 1.0)


class TestSmcRun:
    def test_single_stage_reduces_to_importance_weighting(self, rng):
        prob = kl_linear_problem(3, 16)
        particles0 = prob.sample_prior(128, rng)
        config = SmcConfig(
            n_stages=1, stage_duration=1e-12, ess_threshold=1.0, seed=0
        )
        result = smc_run(prob, particles0, SamplerVariant("gradient_free_corrected"), config)
        log_w = -prob.misfit_batch(particles0)
        expected = np.exp(log_w - log_w.max())
        expected /= expected.sum()
        assert np.abs(result.weights - expected).max() < 1e-12

    def test_weights_normalized_every_stage(self, rng):
        prob = kl_linear_problem(3, 16)
        config = SmcConfig(n_stages=10, stage_duration=1e-3, seed=3)
        result = smc_run(
            prob, prob.sample_prior(64, rng), SamplerVariant("gradient_free_corrected"), config
        )
        assert result.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(result.ess_trace >= 1.0)
        assert np.all(result.ess_trace <= 64.0)

    def test_forced_resample_resets_weights(self, rng):
        prob = kl_linear_problem(3, 16)
        config = SmcConfig(n_stages=1, stage_duration=1e-12, ess_threshold=64.0, seed=1)
        result = smc_run(
            prob, prob.sample_prior(64, rng), SamplerVariant("gradient_free_corrected"), config
        )
        assert result.resampled[0]
        assert np.allclose(result.weights, 1.0 / 64)
        assert ess(result.weights) == pytest.approx(64.0)

    def test_no_mutation_matches_direct_importance_sampling(self, rng):
        # weighted mean against a large independent importance-sampling oracle
        prob = kl_linear_problem(3, 32)
        particles0 = prob.sample_prior(4096, rng)
        config = SmcConfig(n_stages=5, stage_duration=1e-12, ess_threshold=1.0, seed=5)
        result = smc_run(prob, particles0, SamplerVariant("gradient_free_corrected"), config)
        smc_mean = result.weights @ result.particles

        oracle_draws = prob.sample_prior(1_000_000, rng)
        log_w = -prob.misfit_batch(oracle_draws)
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        oracle_mean = w @ oracle_draws
        oracle_se = np.sqrt(w @ (oracle_draws - oracle_mean) ** 2 / ess(w))
        smc_se = np.sqrt(
            result.weights @ (result.particles - smc_mean) ** 2 / ess(result.weights)
        )
        tol = 3 * np.sqrt(oracle_se**2 + smc_se**2)
        assert np.all(np.abs(smc_mean - oracle_mean) <= tol)

    def test_posterior_mean_consistency(self, rng):
        prob = kl_linear_problem(4, 64)
        estimator = TemperedSMC(
            n_stages=100, stage_duration=0.002, n_particles=256, random_state=12
        )
        estimator.fit(prob)
        exact = prob.analytic_posterior.mean
        sd = np.sqrt(np.diag(prob.analytic_posterior.cov))
        se = sd / np.sqrt(ess(estimator.weights_))
        assert np.all(np.abs(estimator.posterior_mean_ - exact) <= 4 * se)


class TestPcn:
    def test_tiny_step_accepts_everything(self, rng):
        prob = kl_linear_problem(3, 16)
        result = pcn_run(prob, np.zeros(3), 1e-9, 1000, seed=0)
        assert result.acceptance_rate == 1.0

    def test_full_step_is_prior_sampler(self):
        prob = pure_prior_problem(2)
        result = pcn_run(prob, np.array([5.0, -5.0]), 1.0, 20_000, seed=1)
        # independent prior proposals, always accepted
        assert result.acceptance_rate == 1.0
        samples = result.chain[1:]
        assert np.abs(samples.mean(axis=0)).max() < 3.5 / np.sqrt(20_000)
        assert np.abs(samples.var(axis=0) - 1.0).max() < 0.05

    def test_pure_prior_accepts_and_matches_moments(self):
        prob = pure_prior_problem(2)
        result = pcn_run(prob, np.zeros(2), 0.3, 30_000, seed=2)
        assert result.acceptance_rate == 1.0
        samples = result.chain[5000:]
        # autocorrelated chain: generous 3 sigma bands with an effective
        # sample size reduced by the mixing time ~ 2 / s^2
        n_eff = samples.shape[0] * 0.3**2 / 2
        assert np.abs(samples.mean(axis=0)).max() < 3 / np.sqrt(n_eff)
        assert np.abs(samples.var(axis=0) - 1.0).max() < 3 * np.sqrt(2 / n_eff)

    def test_posterior_moments_on_linear_problem(self):
        # cross-module oracle: chain moments against the analytic posterior
        prob = kl_linear_problem(3, 16)
        exact = prob.analytic_posterior
        result = pcn_run(prob, exact.mean, 0.5, 60_000, seed=3)
        samples = result.chain[10_000:]
        sd = np.sqrt(np.diag(exact.cov))
        n_eff = samples.shape[0] * 0.5**2 / 2  # crude mixing-time discount
        assert np.all(np.abs(samples.mean(axis=0) - exact.mean) <= 4 * sd / np.sqrt(n_eff))
        assert np.all(
            np.abs(samples.var(axis=0) - np.diag(exact.cov)) <= 4 * np.diag(exact.cov)
        )

    def test_step_size_validation(self):
        prob = pure_prior_problem(1)
        with pytest.raises(ConfigurationError):
            pcn_run(prob, np.zeros(1), 0.0, 10)
        with pytest.raises(ConfigurationError):
            pcn_run(prob, np.zeros(1), 1.5, 10)

    def test_estimator_wrapper(self):
        prob = kl_linear_problem(2, 8)
        sampler = PCNSampler(step_size=0.3, n_steps=500, burn_in=100, thin=5, random_state=9)
        sampler.fit(prob)
        assert sampler.chain_.shape == (501, 2)
        assert sampler.samples_.shape[0] == 81
        assert 0.0 < sampler.acceptance_rate_ <= 1.0
