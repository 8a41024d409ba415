"""Realizations of population expectations E_{x ~ p*}[f(x)].

Two modes sit behind one interface:

* :class:`MonteCarlo` draws ``count`` points with a fixed seed. Every call with
  the same estimator sees the same points (common random numbers).
* :class:`StratifiedMC` draws a fixed number of points per truth component,
  each paired with its reflection through the component mean. Per-component
  sample means are then exact, which removes the leading-order finite-sample
  bias when training on a fixed sample.
* :class:`Quadrature1D` is composite Gauss-Legendre on ``[grid_lo, grid_hi]``
  and only works for one-dimensional models. It is deterministic and has zero
  reported standard error.

Both modes are reduced to a :class:`NodeSet`: points ``X`` and weights ``w``
with ``E[f] ~= sum_k w_k f(X_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np

from gmmlab.errors import InvalidArgument, UnsupportedMode
from gmmlab.model import LOG_2PI, MixtureModel, log_density, sample, sample_component

GRID_PAD = 12.0
GL_ORDER = 16


@dataclass(frozen=True)
class MonteCarlo:
    seed: int
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise InvalidArgument("MonteCarlo.count must be >= 1")


@dataclass(frozen=True)
class StratifiedMC:
    """Per-component antithetic Monte Carlo with about ``count`` points in total."""

    seed: int
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise InvalidArgument("StratifiedMC.count must be >= 2")


@dataclass(frozen=True)
class Quadrature1D:
    grid_lo: float
    grid_hi: float
    nodes: int = 4096

    def __post_init__(self):
        if self.nodes < 16:
            raise InvalidArgument("Quadrature1D.nodes must be >= 16")
        if not self.grid_lo < self.grid_hi:
            raise InvalidArgument("Quadrature1D needs grid_lo < grid_hi")

    @classmethod
    def covering(cls, *models: MixtureModel, nodes: int = 4096, pad: float = GRID_PAD) -> "Quadrature1D":
        """Grid spanning [min mean - pad, max mean + pad] over all models."""
        means = np.concatenate([np.asarray(m.means).ravel() for m in models])
        return cls(float(means.min() - pad), float(means.max() + pad), nodes)

    def covers(self, model: MixtureModel, pad: float = GRID_PAD) -> bool:
        return bool(self.grid_lo <= model.means.min() - pad and self.grid_hi >= model.means.max() + pad)


Estimator = Union[MonteCarlo, StratifiedMC, Quadrature1D]


@lru_cache(maxsize=32)
def _gauss_legendre(lo: float, hi: float, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    panels = -(-nodes // GL_ORDER)
    ref_x, ref_w = np.polynomial.legendre.leggauss(GL_ORDER)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * ref_x[None, :]).ravel()
    w = (half[:, None] * ref_w[None, :]).ravel()
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def gauss_legendre(est: Quadrature1D) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights for Lebesgue measure on the grid."""
    return _gauss_legendre(float(est.grid_lo), float(est.grid_hi), int(est.nodes))


@dataclass(frozen=True, eq=False)
class NodeSet:
    """Weighted points realizing an expectation.

    Attributes:
        X: points, shape (N, d).
        w: weights, shape (N,). Uniform ``1/N`` for Monte Carlo.
        monte_carlo: whether ``stderr`` should be reported from sample spread.
        log_target: log density of the target distribution at ``X`` when known.
        strata: optional ``(labels, stratum_weights)``. Nodes of stratum ``s`` are
            laid out as ``c`` draws followed by their ``c`` reflections, and the
            standard error is computed from pair averages within strata.
    """

    X: np.ndarray
    w: np.ndarray
    monte_carlo: bool
    log_target: Optional[np.ndarray] = None
    strata: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def size(self) -> int:
        return self.X.shape[0]

    def mean(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Weighted mean over the first axis plus its standard error."""
        values = np.asarray(values, dtype=np.float64)
        est = np.tensordot(self.w, values, axes=(0, 0))
        if self.strata is not None:
            return est, self._stratified_stderr(values)
        if self.monte_carlo and self.size > 1:
            se = values.std(axis=0, ddof=1) / np.sqrt(self.size)
        else:
            se = np.zeros_like(est)
        return est, se

    def _stratified_stderr(self, values: np.ndarray) -> np.ndarray:
        labels, stratum_w = self.strata
        var = np.zeros(values.shape[1:])
        for s, ws in enumerate(stratum_w):
            block = values[labels == s]
            c = block.shape[0] // 2
            if c < 2 or ws == 0:
                continue
            pairs = 0.5 * (block[:c] + block[c:])
            var = var + ws ** 2 * pairs.var(axis=0, ddof=1) / c
        return np.sqrt(var)


def _stratified_points(means: np.ndarray, seed: int, per: int, stream: int = 0) -> np.ndarray:
    blocks = []
    for j, mu in enumerate(means):
        z = sample_component(np.zeros_like(mu), seed, per, stream=(stream << 16) + j + 1)
        blocks.append(mu + z)
        blocks.append(mu - z)
    return np.concatenate(blocks)


def _require_1d(est: Quadrature1D, dim: int):
    if dim != 1:
        raise UnsupportedMode(f"quadrature is only available for d = 1, got d = {dim}")


def population_nodes(est: Estimator, truth: MixtureModel) -> NodeSet:
    """Nodes for expectations under the truth mixture p*."""
    if isinstance(est, MonteCarlo):
        X = sample(truth, est.seed, est.count)
        w = np.full(est.count, 1.0 / est.count)
        return NodeSet(X, w, True, log_density(truth, X))
    if isinstance(est, StratifiedMC):
        per = max(2, -(-est.count // (2 * truth.n)))
        X = _stratified_points(truth.means, est.seed, per)
        labels = np.repeat(np.arange(truth.n), 2 * per)
        w = truth.weights[labels] / (2 * per)
        return NodeSet(X, w, True, log_density(truth, X), (labels, truth.weights.copy()))
    if isinstance(est, Quadrature1D):
        _require_1d(est, truth.dim)
        x, gw = gauss_legendre(est)
        X = x.reshape(-1, 1)
        logp = log_density(truth, X)
        return NodeSet(X, gw * np.exp(logp), False, logp)
    raise UnsupportedMode(f"unknown estimator {est!r}")


def gaussian_nodes(est: Estimator, mean, stream: int = 0) -> NodeSet:
    """Nodes for expectations under N(mean, I).

    In Monte Carlo mode ``stream`` selects an independent draw, so the
    per-component expectations of a mixture do not share points.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    if isinstance(est, MonteCarlo):
        X = sample_component(mean, est.seed, est.count, stream)
        return NodeSet(X, np.full(est.count, 1.0 / est.count), True)
    if isinstance(est, StratifiedMC):
        per = max(2, -(-est.count // 2))
        X = _stratified_points(mean[None, :], est.seed, per, stream + 1)
        labels = np.zeros(2 * per, dtype=np.int64)
        return NodeSet(X, np.full(2 * per, 0.5 / per), True, None, (labels, np.ones(1)))
    if isinstance(est, Quadrature1D):
        _require_1d(est, mean.shape[0])
        x, gw = gauss_legendre(est)
        logphi = -0.5 * (LOG_2PI + (x - mean[0]) ** 2)
        return NodeSet(x.reshape(-1, 1), gw * np.exp(logphi), False, logphi)
    raise UnsupportedMode(f"unknown estimator {est!r}")


def expectation(est: Estimator, truth: MixtureModel, f) -> Tuple[np.ndarray, np.ndarray]:
    """E_{x ~ truth}[f(x)] with its standard error; ``f`` maps (N, d) to (N, ...)."""
    nodes = population_nodes(est, truth)
    return nodes.mean(f(nodes.X))
