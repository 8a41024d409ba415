"""Tests for gradient EM training, initialization, trajectories and pruning."""

import numpy as np
import pytest

from gmmlab.errors import InvalidArgument, NumericalAbort
from gmmlab.estimators import MonteCarlo, Quadrature1D, StratifiedMC
from gmmlab.gradients import grad_means_direct
from gmmlab.model import MixtureModel, partition
from gmmlab.trainer import (
    CSV_HEADER,
    Online,
    Population,
    Snapshot,
    TrainConfig,
    Trajectory,
    detect_pruned,
    init_random,
    online_gradient,
    run,
    run_online,
    run_population,
)


def quad_config(truth, fit0, **kw):
    kw.setdefault("snapshot_every", 1)
    return TrainConfig(mode=Population(Quadrature1D.covering(truth, fit0)), **kw)


class TestTrainConfig:
    def test_invariants(self):
        with pytest.raises(InvalidArgument):
            TrainConfig(step_size=0.0)
        with pytest.raises(InvalidArgument):
            TrainConfig(iterations=-1)
        with pytest.raises(InvalidArgument):
            Online(batch=0)

    def test_eps_prime_default(self):
        assert TrainConfig(target_eps=1e-2).resolved_eps_prime(10) == pytest.approx(1e-5)
        assert TrainConfig(eps_prime=3e-7).resolved_eps_prime(10) == 3e-7


class TestInitRandom:
    def test_single_component(self):
        truth = MixtureModel([[0.0, 0.0], [9.0, 0.0]], [0.5, 0.5])
        fit = init_random(truth, 1, 0)
        assert fit.n == 1 and fit.weights[0] == 1.0

    def test_uniform_weights_exact(self):
        truth = MixtureModel([[0.0], [9.0]], [0.5, 0.5])
        fit = init_random(truth, 7, 3)
        assert np.all(fit.weights == 1 / 7)

    def test_deterministic(self):
        truth = MixtureModel([[0.0], [9.0]], [0.5, 0.5])
        np.testing.assert_array_equal(init_random(truth, 5, 11).means, init_random(truth, 5, 11).means)

    def test_every_cluster_covered_at_large_n(self):
        rng = np.random.default_rng(0)
        truth = MixtureModel(12.0 * rng.standard_normal((5, 8)), np.full(5, 0.2))
        covered = 0
        for seed in range(100):
            fit = init_random(truth, 10_000, seed)
            covered += all(len(g) > 0 for g in partition(fit, truth).groups())
        assert covered / 100 >= 0.999

    def test_draws_follow_truth(self):
        truth = MixtureModel([[-20.0], [20.0]], [0.25, 0.75])
        fit = init_random(truth, 40_000, 1)
        assert np.mean(fit.means[:, 0] > 0) == pytest.approx(0.75, abs=0.01)


class TestPopulationTraining:
    def test_stationary_at_optimum(self):
        truth = MixtureModel([[-4.0], [3.0]], [0.4, 0.6])
        tr = run_population(truth, truth, quad_config(truth, truth, iterations=10, step_size=0.5))
        assert np.max(np.abs(tr.final.means - truth.means)) < 1e-6

    def test_two_components_learn_one(self):
        truth = MixtureModel([[0.0]], [1.0])
        fit0 = MixtureModel([[-1.5], [2.0]], [0.5, 0.5])
        tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=500, step_size=0.1))
        losses = tr.losses()
        assert np.all(np.diff(losses) < 0)
        assert losses[-1] <= 1e-6

    def test_monotone_on_random_1d_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            truth = MixtureModel.from_unnormalized(5.0 * rng.standard_normal((2, 1)), rng.uniform(0.3, 1, 2))
            fit0 = init_random(truth, 4, int(rng.integers(1000)))
            tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=60))
            assert tr.is_monotone()

    def test_weights_on_simplex(self):
        truth = MixtureModel([[-4.0], [3.0]], [0.4, 0.6])
        fit0 = init_random(truth, 3, 2)
        tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=30))
        for s in tr.snapshots:
            assert abs(s.weights.sum() - 1) <= 1e-10 and np.all(s.weights >= 0)

    def test_potential_bounded_from_covering_start(self):
        truth = MixtureModel(np.array([[-12.0], [0.0], [12.0]]), [0.3, 0.3, 0.4])
        checked = 0
        for seed in range(20):
            fit0 = init_random(truth, 5, seed)
            # A start that leaves a cluster empty must move a mean across clusters.
            if not all(len(g) for g in partition(fit0, truth).groups()):
                continue
            tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=50))
            u0 = tr.initial.potential_U
            assert max(s.potential_U for s in tr.snapshots) <= 1.05 * u0 + 1e-12
            checked += 1
        assert checked >= 5

    def test_snapshot_schedule(self):
        truth = MixtureModel([[0.0]], [1.0])
        fit0 = MixtureModel([[1.0], [-1.0]], [0.5, 0.5])
        tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=25, snapshot_every=10))
        assert [s.iter for s in tr.snapshots] == [0, 10, 20, 25]

    def test_early_stop(self):
        truth = MixtureModel([[0.0]], [1.0])
        fit0 = MixtureModel([[0.5]], [1.0])
        tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=100, target_eps=1e-6))
        assert tr.stopped_early and tr.final.loss.value <= 1e-6

    def test_deterministic_monte_carlo(self):
        truth = MixtureModel([[0.0, 0.0], [6.0, 0.0]], [0.5, 0.5])
        fit0 = init_random(truth, 3, 0)
        cfg = TrainConfig(iterations=20, mode=Population(StratifiedMC(3, 2000)), snapshot_every=5)
        assert run(truth, fit0, cfg).to_json() == run(truth, fit0, cfg).to_json()

    def test_wrong_mode(self):
        truth = MixtureModel([[0.0]], [1.0])
        with pytest.raises(InvalidArgument):
            run_population(truth, truth, TrainConfig(mode=Online(10)))
        with pytest.raises(InvalidArgument):
            run_online(truth, truth, TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_trajectory(self):
        truth = MixtureModel([[0.0]], [1.0])
        fit0 = MixtureModel([[1e200]], [1.0])
        with pytest.raises(NumericalAbort) as info:
            run_population(truth, fit0, TrainConfig(iterations=3, mode=Population(MonteCarlo(0, 10))))
        assert info.value.trajectory is not None and info.value.trajectory.aborted


class TestOnlineTraining:
    def test_batch_of_one(self):
        truth = MixtureModel([[0.0], [5.0]], [0.5, 0.5])
        tr = run_online(truth, init_random(truth, 3, 0), TrainConfig(iterations=10, mode=Online(1)))
        assert len(tr.snapshots) >= 2

    def test_large_batch_matches_population_gradient(self):
        truth = MixtureModel([[-3.0], [2.0]], [0.4, 0.6])
        fit = MixtureModel([[-2.0], [0.0], [3.0]], [0.3, 0.3, 0.4])
        exact = grad_means_direct(truth, fit, Quadrature1D.covering(truth, fit))
        g, se = online_gradient(truth, fit, 200_000, 5)
        assert np.linalg.norm(g - exact) <= 3 * np.sqrt(np.sum(se ** 2))

    def test_fresh_batches_per_iteration(self):
        truth = MixtureModel([[0.0], [5.0]], [0.5, 0.5])
        fit0 = init_random(truth, 2, 0)
        a = run_online(truth, fit0, TrainConfig(iterations=5, mode=Online(500, base_seed=0), snapshot_every=1))
        b = run_online(truth, fit0, TrainConfig(iterations=5, mode=Online(500, base_seed=1), snapshot_every=1))
        assert not np.array_equal(a.final.means, b.final.means)


class TestTrajectoryIO:
    def make(self):
        truth = MixtureModel([[0.0], [5.0]], [0.5, 0.5])
        fit0 = init_random(truth, 3, 0)
        return run_population(truth, fit0, quad_config(truth, fit0, iterations=4, snapshot_every=2))

    def test_csv_header(self):
        lines = self.make().to_csv().splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) == 4

    def test_json_round_trip(self):
        tr = self.make()
        back = Trajectory.from_json(tr.to_json())
        assert back.to_json() == tr.to_json()
        np.testing.assert_array_equal(back.final.means, tr.final.means)

    def test_iterations_strictly_increasing(self):
        s = self.make().snapshots[0]
        with pytest.raises(InvalidArgument):
            Trajectory((s, s))

    def test_snapshot_model(self):
        s = self.make().final
        assert isinstance(s, Snapshot)
        np.testing.assert_array_equal(s.model.weights, s.weights)


class TestDetectPruned:
    def test_uniform_none_pruned(self):
        assert detect_pruned(MixtureModel.uniform(np.arange(10.0).reshape(-1, 1)), 1e-3) == []

    def test_threshold_zero(self):
        fit = MixtureModel([[0.0], [1.0], [2.0]], [0.5, 0.0, 0.5])
        assert detect_pruned(fit, 0.0) == [1]

    def test_threshold_range(self):
        with pytest.raises(InvalidArgument):
            detect_pruned(MixtureModel([[0.0]], [1.0]), 1.0)

    def test_overparameterized_run_prunes(self):
        truth = MixtureModel([[-8.0], [8.0]], [0.5, 0.5])
        fit0 = MixtureModel([[-8.5], [-7.0], [7.5], [9.0], [0.5]], np.full(5, 0.2))
        tr = run_population(truth, fit0, quad_config(truth, fit0, iterations=400, snapshot_every=100))
        pruned = detect_pruned(tr.final.model, 1e-3)
        assert len(pruned) >= 1
        assert tr.final.weights[pruned].sum() <= 0.01
