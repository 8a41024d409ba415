"""Tests for mean and weight gradients and the finite-difference oracle."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmlab.errors import InvalidArgument
from gmmlab.estimators import MonteCarlo, Quadrature1D
from gmmlab.gradients import (
    ConditioningWarning,
    fd_gradient,
    grad_means_direct,
    grad_means_stein,
    grad_weights,
    gradient_bundle,
)
from gmmlab.model import MixtureModel


def random_model(rng, n, d, scale=2.0):
    return MixtureModel.from_unnormalized(scale * rng.standard_normal((n, d)), rng.uniform(0.2, 1.0, n))


class TestMeanGradients:
    def test_zero_at_optimum(self):
        truth = MixtureModel([[-2.0], [1.0], [4.0]], [0.2, 0.5, 0.3])
        est = Quadrature1D.covering(truth)
        assert np.max(np.abs(grad_means_direct(truth, truth, est))) <= 1e-8
        assert np.max(np.abs(grad_means_stein(truth, truth, est))) <= 1e-8

    def test_single_component_closed_form(self):
        theta, mu = 1.3, -0.4
        truth, fit = MixtureModel([[theta]], [1.0]), MixtureModel([[mu]], [1.0])
        est = Quadrature1D.covering(truth, fit)
        np.testing.assert_allclose(grad_means_direct(truth, fit, est), [[mu - theta]], atol=1e-12)
        np.testing.assert_allclose(grad_means_stein(truth, fit, est), [[mu - theta]], atol=1e-12)

    def test_single_component_monte_carlo(self):
        theta = np.array([1.0, -2.0])
        mu = np.array([0.5, 0.5])
        truth, fit = MixtureModel([theta], [1.0]), MixtureModel([mu], [1.0])
        g, se = grad_means_direct(truth, fit, MonteCarlo(1, 20000), return_stderr=True)
        assert np.all(np.abs(g[0] - (mu - theta)) <= 3 * se[0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_stein_matches_direct_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        truth = random_model(rng, int(rng.integers(1, 4)), 1)
        fit = random_model(rng, int(rng.integers(1, 5)), 1)
        est = Quadrature1D.covering(truth, fit)
        gap = np.max(np.abs(grad_means_direct(truth, fit, est) - grad_means_stein(truth, fit, est)))
        assert gap <= 1e-7

    def test_stein_matches_direct_monte_carlo(self):
        rng = np.random.default_rng(4)
        for rep in range(10):
            d = int(rng.integers(1, 9))
            truth, fit = random_model(rng, 3, d), random_model(rng, 4, d)
            gd, sd = grad_means_direct(truth, fit, MonteCarlo(rep, 20000), return_stderr=True)
            gs, ss = grad_means_stein(truth, fit, MonteCarlo(1000 + rep, 20000), return_stderr=True)
            err = np.linalg.norm(gd - gs)
            assert err <= 3 * np.sqrt(np.sum(sd ** 2 + ss ** 2))

    def test_translation_covariant(self):
        rng = np.random.default_rng(5)
        truth, fit = random_model(rng, 2, 1), random_model(rng, 3, 1)
        shift = 3.7
        a = grad_means_direct(truth, fit, Quadrature1D.covering(truth, fit))
        moved_t, moved_f = truth.translated([shift]), fit.translated([shift])
        b = grad_means_direct(moved_t, moved_f, Quadrature1D.covering(moved_t, moved_f))
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            grad_means_direct(MixtureModel([[0.0]], [1.0]), MixtureModel([[0.0, 0.0]], [1.0]), MonteCarlo(0, 10))


class TestWeightGradient:
    def test_minus_one_at_optimum(self):
        truth = MixtureModel([[-3.0], [2.0]], [0.4, 0.6])
        g = grad_weights(truth, truth, Quadrature1D.covering(truth))
        np.testing.assert_allclose(g, [-1.0, -1.0], atol=1e-8)

    def test_single_component(self):
        truth = MixtureModel([[-3.0], [2.0]], [0.4, 0.6])
        fit = MixtureModel([[0.5]], [1.0])
        np.testing.assert_allclose(grad_weights(truth, fit, MonteCarlo(0, 100)), [-1.0], atol=1e-14)

    def test_normalization_identity(self):
        rng = np.random.default_rng(6)
        for rep in range(20):
            truth, fit = random_model(rng, 3, 2), random_model(rng, 5, 2)
            g = grad_weights(truth, fit, MonteCarlo(rep, 2000))
            assert fit.weights @ g == pytest.approx(-1.0, abs=1e-12)

    def test_zero_weight_component_defined(self):
        truth = MixtureModel([[0.0]], [1.0])
        fit = MixtureModel([[0.0], [0.5]], [1.0, 0.0])
        g = grad_weights(truth, fit, Quadrature1D.covering(truth, fit))
        assert np.all(np.isfinite(g))
        assert g[1] == pytest.approx(-1.0, abs=1e-8)

    def test_bundle_shapes(self):
        rng = np.random.default_rng(0)
        truth, fit = random_model(rng, 2, 3), random_model(rng, 4, 3)
        b = gradient_bundle(truth, fit, MonteCarlo(0, 500))
        assert b.grad_means.shape == (4, 3)
        assert b.grad_weights.shape == (4,)
        assert b.estimator_stderr > 0


class TestFiniteDifference:
    def test_exact_for_single_component_fit(self):
        # With one fitted component the loss is quadratic in its mean.
        truth, fit = MixtureModel([[0.0], [3.0]], [0.5, 0.5]), MixtureModel([[0.9]], [1.0])
        est = Quadrature1D.covering(truth, fit)
        exact = grad_means_direct(truth, fit, est)
        np.testing.assert_allclose(fd_gradient(truth, fit, est, 0.3).grad_means, exact, atol=1e-10)

    def test_second_order_error(self):
        truth = MixtureModel([[0.0], [3.0]], [0.5, 0.5])
        fit = MixtureModel([[0.4], [2.2]], [0.6, 0.4])
        est = Quadrature1D.covering(truth, fit)
        exact = grad_means_direct(truth, fit, est)
        e1 = np.max(np.abs(fd_gradient(truth, fit, est, 0.02).grad_means - exact))
        e2 = np.max(np.abs(fd_gradient(truth, fit, est, 0.01).grad_means - exact))
        assert 3.5 <= e1 / e2 <= 4.5

    def test_zero_at_optimum(self):
        truth = MixtureModel([[-2.0], [2.0]], [0.5, 0.5])
        fd = fd_gradient(truth, truth, Quadrature1D.covering(truth), 1e-4)
        assert np.max(np.abs(fd.grad_means)) <= 1e-6
        np.testing.assert_allclose(fd.grad_weights, [-1.0, -1.0], atol=1e-6)

    def test_matches_analytic_with_common_samples(self):
        rng = np.random.default_rng(8)
        h = 1e-4
        for rep in range(10):
            d = int(rng.integers(1, 5))
            truth, fit = random_model(rng, 3, d), random_model(rng, 3, d)
            est = MonteCarlo(rep, 2000)
            fd = fd_gradient(truth, fit, est, h)
            gm = grad_means_direct(truth, fit, est)
            gw = grad_weights(truth, fit, est)
            assert np.max(np.abs(fd.grad_means - gm)) <= max(1e-5, 10 * h * h) * max(1.0, np.max(np.abs(gm)))
            np.testing.assert_allclose(fd.grad_weights, gw, atol=1e-5 * max(1.0, np.max(np.abs(gw))))

    def test_tiny_step_warns(self):
        truth, fit = MixtureModel([[0.0]], [1.0]), MixtureModel([[1.0]], [1.0])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fd_gradient(truth, fit, MonteCarlo(0, 100), 1e-17)
        assert any(issubclass(w.category, ConditioningWarning) for w in caught)

    def test_requires_positive_step(self):
        m = MixtureModel([[0.0]], [1.0])
        with pytest.raises(InvalidArgument):
            fd_gradient(m, m, MonteCarlo(0, 10), 0.0)
