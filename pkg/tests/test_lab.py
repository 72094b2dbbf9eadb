"""
Tests for the closed-form Gaussian lab.
"""

import numpy as np
import pytest
from scipy import linalg

from nrlg import lab
from nrlg.denoiser import (
    GaussianPrior,
    analytic_predict_noise,
    conditional_mean,
    conditional_variance,
)
from nrlg.errors import DomainError
from nrlg.linops import build_operator


SHAPE = (8, 8, 1)


class TestPosterior:
    """Test the exact posterior and the lifted baseline."""

    def test_identity_posterior(self, rng):
        prior = GaussianPrior(rng.uniform(0, 1, SHAPE), rng.uniform(0.01, 0.1, SHAPE))
        y = rng.uniform(0, 1, SHAPE)
        post = lab.exact_posterior(build_operator("identity", SHAPE), prior, y, 0.1)
        weight = prior.variance / (prior.variance + 0.01)
        np.testing.assert_allclose(post.mean, prior.mean + weight * (y - prior.mean), rtol=1e-12)
        expected_var = prior.variance * 0.01 / (prior.variance + 0.01)
        np.testing.assert_allclose(np.diag(post.covariance), expected_var.ravel(), rtol=1e-10)

    def test_orthogonal_noiseless(self, rng):
        """A square orthogonal operator with sigma_y = 0 pins the posterior to A^T y."""
        op = build_operator("cs:ratio=1.0,block=8,seed=3", SHAPE)
        prior = GaussianPrior.isotropic(SHAPE, 0.5, 0.01)
        y = op.apply(rng.uniform(0, 1, SHAPE))
        post = lab.exact_posterior(op, prior, y, 0.0)
        np.testing.assert_allclose(post.mean, op.adjoint(y), atol=1e-10)
        np.testing.assert_allclose(post.covariance, 0.0, atol=1e-10)

    def test_lifted_baseline_consistent(self, rng):
        op = build_operator("cs:ratio=0.25,block=8,seed=1", SHAPE)
        prior = GaussianPrior.isotropic(SHAPE, 0.5, 0.01)
        y = rng.standard_normal(op.output_shape)
        lifted = lab.lifted_baseline(op, prior, y)
        np.testing.assert_allclose(op.apply(lifted), y, atol=1e-12)


class TestScores:
    """Test the exact likelihood gradients."""

    @pytest.fixture
    def problem(self, schedule, rng):
        op = build_operator("cs:ratio=0.25,block=8,seed=2", SHAPE)
        prior = GaussianPrior(rng.uniform(0.3, 0.7, SHAPE), rng.uniform(0.01, 0.1, SHAPE))
        y = op.apply(prior.sample(rng)) + 0.05 * rng.standard_normal(op.output_shape)
        return op, prior, y, rng.standard_normal(SHAPE)

    def test_exact_covariance_is_log_likelihood_gradient(self, schedule, problem):
        """The 'exact' score is the gradient of log N(y; A E[x0|x_t], A Cov A^T + sigma^2 I)."""
        op, prior, y, x_t = problem
        t = 40
        A = op.to_dense()
        V = conditional_variance(prior, schedule, t).ravel()
        factor = linalg.cho_factor((A * V) @ A.T + 0.0025 * np.eye(A.shape[0]))

        def log_likelihood(x):
            r = y.ravel() - A @ conditional_mean(prior, schedule, x, t).ravel()
            return -0.5 * float(r @ linalg.cho_solve(factor, r))

        fd = lab.finite_difference_gradient(log_likelihood, x_t)
        score = lab.exact_likelihood_score(op, prior, schedule, x_t, y, t, 0.05, "exact")
        assert lab.relative_error(score, fd) < 1e-6

    def test_frozen_noise_check(self, schedule, problem, rng):
        op, _, y, x_t = problem
        eps = rng.standard_normal(SHAPE)
        assert lab.frozen_noise_score_check(op, schedule, x_t, eps, y, 50, 0.05) < 1e-5

    def test_unknown_covariance(self, schedule, problem):
        op, prior, y, x_t = problem
        with pytest.raises(DomainError):
            lab.exact_likelihood_score(op, prior, schedule, x_t, y, 10, 0.05, "diagonal")

    def test_jacobian_deviation(self, schedule, problem):
        op, prior, y, x_t = problem
        d = lab.jacobian_assumption_deviation(op, prior, schedule, x_t, y, 30, 0.05)
        assert d.corrected_error < 1e-8
        assert d.uncorrected_error > 1e-3
        assert d.exact_covariance_gap > 0
        assert set(d.to_dict()) == {"prior_variance", "t", "corrected_error",
                                    "uncorrected_error", "exact_covariance_gap"}

    def test_uncorrected_error_shrinks_with_prior_variance(self, schedule, rng):
        """For an isotropic prior the error is (1 - ab) / (ab c0)."""
        op = build_operator("cs:ratio=0.25,block=8,seed=2", SHAPE)
        deviations = lab.sweep_prior_variance(op, schedule, SHAPE, [0.01, 1.0, 100.0], 20, 0.05,
                                              rng)
        ab = schedule.alpha_bar(20)
        for d in deviations:
            expected = (1 - ab) / (ab * d.prior_variance)
            assert d.uncorrected_error == pytest.approx(expected, rel=1e-6)


class TestHelpers:
    """Test numeric helpers and sampling checks."""

    def test_finite_difference_of_quadratic(self):
        grad = lab.finite_difference_gradient(lambda x: float(np.sum(x ** 2)),
                                              np.array([1.0, -2.0]))
        np.testing.assert_allclose(grad, [2.0, -4.0], rtol=1e-8)

    def test_relative_error_edges(self):
        assert lab.relative_error(np.zeros(2), np.zeros(2)) == 0.0
        assert lab.relative_error(np.ones(2), np.zeros(2)) == float("inf")
        assert lab.relative_error(np.array([1.1]), np.array([1.0])) == pytest.approx(0.1)

    def test_marginal_moments(self, rng):
        samples = lab.compose_gaussian_marginal(0.5, 0.4, 0.2, 1.0, 200_000, rng)
        z_mean, z_var = lab.moment_z_scores(samples, 0.5, 0.25 * 0.4 + 0.2)
        assert abs(z_mean) < 5 and abs(z_var) < 5

    def test_marginal_rejects_negative_variance(self, rng):
        with pytest.raises(DomainError):
            lab.compose_gaussian_marginal(1.0, -0.1, 0.1, 0.0, 10, rng)

    def test_z_scores_exact_sample(self):
        z_mean, z_var = lab.moment_z_scores(np.array([-1.0, 1.0]), 0.0, 2.0)
        assert z_mean == 0.0
        assert z_var == 0.0

    def test_mmse_comparison(self, schedule, rng):
        """Every shift of the analytic predictor along d costs squared error."""
        prior = GaussianPrior.isotropic((16, 16, 1), 0.5, 0.01)
        results = lab.mmse_comparison(prior, schedule, 50, 20_000, rng, batch_size=3000)
        assert list(results) == ["delta_+0.01", "delta_-0.01", "delta_+0.1", "delta_-0.1",
                                 "sign_0.5"]
        for mean, se in results.values():
            assert mean > 3 * se > 0
        assert results["delta_+0.1"][0] > results["delta_+0.01"][0]

    def test_perturbed_predictors_shift_along_direction(self, schedule, rng):
        prior = GaussianPrior.isotropic((4, 4, 1), 0.5, 0.01)
        direction = rng.standard_normal(prior.shape)
        x_t = rng.standard_normal(prior.shape)
        best = analytic_predict_noise(prior, schedule, x_t, 20)
        shifted = dict(lab.perturbed_predictors(prior, schedule, direction))
        np.testing.assert_allclose(shifted["delta_-0.1"](x_t, 20), best - 0.1 * direction)
        np.testing.assert_allclose(shifted["sign_0.5"](x_t, 20), best + 0.5 * np.sign(direction))
