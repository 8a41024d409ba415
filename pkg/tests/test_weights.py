"""Tests for the EM fixed-point weight solver and its KKT certificate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmlab.errors import InvalidArgument
from gmmlab.estimators import MonteCarlo, Quadrature1D, population_nodes
from gmmlab.gradients import grad_weights
from gmmlab.model import MixtureModel
from gmmlab.weights import KktCertificate, WeightSubproblem, kkt_residual, solve_weights


def random_instance(rng, m=3, n=4):
    truth = MixtureModel.from_unnormalized(4.0 * rng.standard_normal((m, 1)), rng.uniform(0.2, 1.0, m))
    means = 4.0 * rng.standard_normal((n, 1))
    return truth, means


class TestKktResidual:
    def test_arithmetic_example(self):
        assert kkt_residual([0.5, 0.5], [-2.0, 0.0]) == pytest.approx(0.5)

    def test_zero_at_optimum(self):
        truth = MixtureModel([[-4.0], [3.0]], [0.3, 0.7])
        g = grad_weights(truth, truth, Quadrature1D.covering(truth))
        assert kkt_residual(truth.weights, g) <= 1e-8

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pi = rng.dirichlet(np.ones(6))
            g = rng.normal(-1, 2, 6)
            assert kkt_residual(pi, g) == max(pi[i] * abs(g[i] + 1) for i in range(6))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            kkt_residual([1.0], [0.0, 1.0])

    def test_certificate_rejects_negative_residual(self):
        with pytest.raises(InvalidArgument):
            KktCertificate(-1.0, 0, False)


class TestSolveWeights:
    def test_recovers_truth_weights_at_exact_means(self):
        truth = MixtureModel([[-6.0], [0.0], [7.0]], [0.2, 0.5, 0.3])
        pi, cert = solve_weights(truth, truth.means, np.full(3, 1 / 3), Quadrature1D.covering(truth), 1e-9)
        assert cert.converged
        np.testing.assert_allclose(pi, truth.weights, atol=1e-6)

    def test_single_component(self):
        truth = MixtureModel([[-1.0], [2.0]], [0.5, 0.5])
        pi, cert = solve_weights(truth, [[0.3]], [1.0], Quadrature1D.covering(truth), 1e-6)
        np.testing.assert_array_equal(pi, [1.0])
        assert cert.residual == 0.0 and cert.converged

    def test_duplicated_means(self):
        truth = MixtureModel([[-3.0], [3.0]], [0.4, 0.6])
        means = [[-3.0], [3.0], [3.0]]
        pi, cert = solve_weights(truth, means, [0.2, 0.5, 0.3], Quadrature1D.covering(truth), 1e-8)
        assert cert.converged and cert.residual <= 2e-8
        assert pi[1] + pi[2] == pytest.approx(0.6, abs=1e-6)

    def test_max_iters_is_not_an_error(self):
        rng = np.random.default_rng(1)
        truth, means = random_instance(rng)
        pi, cert = solve_weights(truth, means, np.full(4, 0.25), Quadrature1D.covering(truth), 1e-14, max_iters=3)
        assert not cert.converged and cert.iterations == 3
        assert abs(pi.sum() - 1) <= 1e-12

    def test_invalid_inputs(self):
        truth = MixtureModel([[0.0]], [1.0])
        est = Quadrature1D.covering(truth)
        with pytest.raises(InvalidArgument):
            solve_weights(truth, [[0.0]], [1.0], est, 0.0)
        with pytest.raises(InvalidArgument):
            solve_weights(truth, [[0.0], [1.0]], [0.7, 0.7], est, 1e-6)
        with pytest.raises(InvalidArgument):
            solve_weights(truth, [[0.0, 0.0]], [1.0], est, 1e-6)

    def test_monotone_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            truth, means = random_instance(rng, int(rng.integers(1, 4)), int(rng.integers(1, 6)))
            n = means.shape[0]
            _, cert = solve_weights(truth, means, rng.dirichlet(np.ones(n)), Quadrature1D.covering(truth), 1e-7)
            assert np.all(np.diff(cert.loss_history) <= 1e-10)

    def test_monte_carlo_mode(self):
        truth = MixtureModel([[-4.0, 0.0], [4.0, 0.0]], [0.3, 0.7])
        pi, cert = solve_weights(truth, truth.means, [0.5, 0.5], MonteCarlo(0, 20000), 1e-8)
        assert cert.converged
        np.testing.assert_allclose(pi, truth.weights, atol=0.02)


class TestFixedPointProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_simplex_preserved_and_zeros_absorbing(self, seed):
        rng = np.random.default_rng(seed)
        truth, means = random_instance(rng, 2, 5)
        pi0 = rng.dirichlet(np.ones(5))
        pi0[rng.integers(0, 5)] = 0.0
        pi0 /= pi0.sum()
        problem = WeightSubproblem(population_nodes(Quadrature1D.covering(truth), truth), means)
        pi = pi0
        for _ in range(20):
            _, g, _ = problem.evaluate(pi)
            new = pi * (-g)
            pi = new / new.sum()
            assert abs(pi.sum() - 1.0) <= 1e-12
            assert np.all(pi >= 0)
            np.testing.assert_array_equal(pi[pi0 == 0], 0.0)

    def test_subproblem_matches_generic_gradient(self):
        rng = np.random.default_rng(3)
        truth, means = random_instance(rng)
        fit = MixtureModel(means, rng.dirichlet(np.ones(4)))
        est = Quadrature1D.covering(truth, fit)
        problem = WeightSubproblem(population_nodes(est, truth), means)
        _, g, _ = problem.evaluate(fit.weights)
        np.testing.assert_allclose(g, grad_weights(truth, fit, est), rtol=1e-10)
