"""Gradient EM with near-optimal weights, in population and online form.

Each iteration first solves the weight subproblem to a first-order residual of
``2 * eps_prime`` and then takes one gradient step on the means at the new
weights. Population mode reuses one fixed node set for every iteration; online
mode draws a fresh batch of ``N`` samples per iteration.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from gmmlab.divergence import LossEstimate, kl_on_nodes
from gmmlab.errors import InvalidArgument, NumericalAbort
from gmmlab.estimators import Estimator, MonteCarlo, NodeSet, population_nodes
from gmmlab.gradients import grad_means_on_nodes
from gmmlab.model import MixtureModel, _generator, format_float, potential_U
from gmmlab.weights import WeightSubproblem, kkt_residual

DEFAULT_STEP_SIZE = 1.0
DEFAULT_EPS_PRIME = 1e-8
CSV_HEADER = ("iter", "loss", "loss_stderr", "potential_U", "kkt_residual", "grad_norm")
MONOTONE_TOL = 1e-10


@dataclass(frozen=True)
class Population:
    est: Estimator


@dataclass(frozen=True)
class Online:
    batch: int
    base_seed: int = 0

    def __post_init__(self):
        if self.batch < 1:
            raise InvalidArgument("online batch size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Attributes:
        step_size: mean step size eta. Any eta in (0, 2) keeps the loss
            non-increasing under exact expectations; see :func:`default_step_size`.
        iterations: number of iterations T.
        target_eps: stop at a snapshot once ``loss - 3 * stderr <= target_eps``.
            Zero disables early stopping.
        mode: :class:`Population` or :class:`Online`.
        eps_prime: weight-subproblem tolerance; ``None`` means ``target_eps**2 / n``
            (or ``DEFAULT_EPS_PRIME`` when ``target_eps`` is zero).
        snapshot_every: snapshot period; the initial and final states are always kept.
        loss_est: independent estimator for reported losses. ``None`` reports the
            loss on the training nodes.
        weight_max_iters: cap on fixed-point updates per weight solve.
    """

    step_size: float = DEFAULT_STEP_SIZE
    iterations: int = 5000
    target_eps: float = 0.0
    mode: Union[Population, Online] = field(default_factory=lambda: Population(MonteCarlo(0, 20_000)))
    eps_prime: Optional[float] = None
    snapshot_every: int = 100
    loss_est: Optional[Estimator] = None
    weight_max_iters: int = 1000

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidArgument("step_size must be positive")
        if self.iterations < 0:
            raise InvalidArgument("iterations must be >= 0")
        if self.target_eps < 0:
            raise InvalidArgument("target_eps must be >= 0")
        if self.snapshot_every < 1:
            raise InvalidArgument("snapshot_every must be >= 1")
        if self.eps_prime is not None and not self.eps_prime > 0:
            raise InvalidArgument("eps_prime must be positive")

    def resolved_eps_prime(self, n: int) -> float:
        if self.eps_prime is not None:
            return self.eps_prime
        if self.target_eps > 0:
            return self.target_eps ** 2 / n
        return DEFAULT_EPS_PRIME


def default_step_size(truth: MixtureModel = None, n: int = None) -> float:
    """Step size used when none is configured.

    The mean step moves ``mu_i`` a fraction ``eta * E[psi_i]`` of the way to its
    EM target, and the EM surrogate guarantees descent whenever that fraction is
    in (0, 2). Because ``E[psi_i] <= 1``, ``eta = 1`` is safe for every instance.
    """
    return DEFAULT_STEP_SIZE


@dataclass(frozen=True, eq=False)
class Snapshot:
    iter: int
    loss: LossEstimate
    weights: np.ndarray
    means: np.ndarray
    potential_U: float
    kkt_residual: float
    grad_norm: float

    @property
    def model(self) -> MixtureModel:
        return MixtureModel(self.means, self.weights)

    def to_dict(self) -> dict:
        return {"iter": self.iter, "loss": self.loss.value, "loss_stderr": self.loss.stderr,
                "potential_U": self.potential_U, "kkt_residual": self.kkt_residual,
                "grad_norm": self.grad_norm, "weights": self.weights.tolist(),
                "means": self.means.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "Snapshot":
        return cls(int(obj["iter"]), LossEstimate(float(obj["loss"]), float(obj["loss_stderr"])),
                   np.asarray(obj["weights"], dtype=np.float64),
                   np.asarray(obj["means"], dtype=np.float64),
                   float(obj["potential_U"]), float(obj["kkt_residual"]), float(obj["grad_norm"]))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Snapshots of one training run, in increasing iteration order."""

    snapshots: Tuple[Snapshot, ...]
    stopped_early: bool = False
    aborted: bool = False

    def __post_init__(self):
        iters = [s.iter for s in self.snapshots]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise InvalidArgument("snapshot iterations must be strictly increasing")

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]

    @property
    def initial(self) -> Snapshot:
        return self.snapshots[0]

    def losses(self) -> np.ndarray:
        return np.array([s.loss.value for s in self.snapshots])

    def is_monotone(self, tol: float = MONOTONE_TOL) -> bool:
        return bool(np.all(np.diff(self.losses()) <= tol))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in self.snapshots:
            writer.writerow([s.iter] + [format_float(v) for v in (
                s.loss.value, s.loss.stderr, s.potential_U, s.kkt_residual, s.grad_norm)])
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {"stopped_early": self.stopped_early, "aborted": self.aborted,
               "snapshots": [s.to_dict() for s in self.snapshots]}
        return json.dumps(obj) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        obj = json.loads(text)
        snaps = tuple(Snapshot.from_dict(s) for s in obj["snapshots"])
        return cls(snaps, bool(obj.get("stopped_early", False)), bool(obj.get("aborted", False)))


def init_random(truth: MixtureModel, n: int, seed: int) -> MixtureModel:
    """n means drawn i.i.d. from the truth mixture, uniform weights."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = _generator(seed, 0x696E6974)
    labels = rng.choice(truth.n, size=n, p=truth.weights)
    means = truth.means[labels] + rng.standard_normal((n, truth.dim))
    return MixtureModel.uniform(means)


def detect_pruned(fit: MixtureModel, threshold: float) -> List[int]:
    """Indices of components whose weight is at most ``threshold``."""
    if not 0 <= threshold < 1:
        raise InvalidArgument("threshold must lie in [0, 1)")
    return [int(i) for i in np.flatnonzero(fit.weights <= threshold)]


class _Recorder:
    def __init__(self, truth: MixtureModel, cfg: TrainConfig):
        self.truth = truth
        self.cfg = cfg
        self.report_nodes = None if cfg.loss_est is None else population_nodes(cfg.loss_est, truth)
        self.snapshots: List[Snapshot] = []

    def record(self, t: int, model: MixtureModel, nodes: NodeSet) -> Snapshot:
        problem = WeightSubproblem(nodes, model.means)
        _, g, B = problem.evaluate(model.weights)
        grad = problem.grad_means(model.weights, B)
        if self.report_nodes is None:
            loss = kl_on_nodes(nodes, model)
        else:
            loss = kl_on_nodes(self.report_nodes, model, nonneg=True)
        snap = Snapshot(t, loss, model.weights.copy(), model.means.copy(), potential_U(model, self.truth),
                        kkt_residual(model.weights, g), float(np.linalg.norm(grad)))
        self.snapshots.append(snap)
        if not (np.isfinite(loss.value) and np.isfinite(snap.grad_norm)):
            raise NumericalAbort(f"non-finite loss or gradient at iteration {t}", self.trajectory(aborted=True))
        return snap

    def trajectory(self, stopped_early: bool = False, aborted: bool = False) -> Trajectory:
        return Trajectory(tuple(self.snapshots), stopped_early, aborted)

    def should_stop(self, snap: Snapshot) -> bool:
        eps = self.cfg.target_eps
        return eps > 0 and snap.loss.value - 3.0 * snap.loss.stderr <= eps


def _train(truth: MixtureModel, fit0: MixtureModel, cfg: TrainConfig, node_source) -> Trajectory:
    if truth.dim != fit0.dim:
        raise InvalidArgument("truth and fit dimensions differ")
    eps_prime = cfg.resolved_eps_prime(fit0.n)
    rec = _Recorder(truth, cfg)
    model = fit0
    snap = rec.record(0, model, node_source(0))
    if rec.should_stop(snap) or cfg.iterations == 0:
        return rec.trajectory(stopped_early=cfg.iterations > 0)
    for t in range(1, cfg.iterations + 1):
        nodes = node_source(t)
        problem = WeightSubproblem(nodes, model.means)
        weights, _ = problem.solve(model.weights, eps_prime, cfg.weight_max_iters)
        _, _, B = problem.evaluate(weights)
        grad = problem.grad_means(weights, B)
        if not np.all(np.isfinite(grad)):
            raise NumericalAbort(f"non-finite gradient at iteration {t}", rec.trajectory(aborted=True))
        model = MixtureModel(model.means - cfg.step_size * grad, weights)
        last = t == cfg.iterations
        if last or t % cfg.snapshot_every == 0:
            snap = rec.record(t, model, nodes)
            if rec.should_stop(snap):
                return rec.trajectory(stopped_early=not last)
    return rec.trajectory()


def run_population(truth: MixtureModel, fit0: MixtureModel, cfg: TrainConfig) -> Trajectory:
    """Population gradient EM on one fixed node set."""
    if not isinstance(cfg.mode, Population):
        raise InvalidArgument("run_population needs a Population mode config")
    nodes = population_nodes(cfg.mode.est, truth)
    return _train(truth, fit0, cfg, lambda t: nodes)


def online_nodes(truth: MixtureModel, batch: int, seed: int) -> NodeSet:
    return population_nodes(MonteCarlo(seed, batch), truth)


def run_online(truth: MixtureModel, fit0: MixtureModel, cfg: TrainConfig) -> Trajectory:
    """Gradient EM where iteration t uses a fresh batch drawn with seed ``base_seed + t``.

    The snapshot at iteration t is evaluated on the batch that produced it, so
    without ``loss_est`` the reported loss is a noisy batch estimate.
    """
    if not isinstance(cfg.mode, Online):
        raise InvalidArgument("run_online needs an Online mode config")
    mode = cfg.mode
    return _train(truth, fit0, cfg, lambda t: online_nodes(truth, mode.batch, mode.base_seed + t))


def run(truth: MixtureModel, fit0: MixtureModel, cfg: TrainConfig) -> Trajectory:
    if isinstance(cfg.mode, Online):
        return run_online(truth, fit0, cfg)
    return run_population(truth, fit0, cfg)


def online_gradient(truth: MixtureModel, fit: MixtureModel, batch: int, seed: int):
    """Empirical mean gradient on one fresh batch, with per-entry standard errors."""
    return grad_means_on_nodes(online_nodes(truth, batch, seed), fit, return_stderr=True)
