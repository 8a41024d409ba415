"""Weight subproblem: minimize the loss over the simplex with the means held fixed.

The solver is the EM fixed point ``pi_i <- E_{p*}[psi_i(x)]``, a
majorize-minimize step for a loss that is convex in the weights. It stays on
the simplex, never increases the loss on the nodes it uses, and leaves
zero weights at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from gmmlab.errors import InvalidArgument
from gmmlab.estimators import Estimator, NodeSet, population_nodes
from gmmlab.model import LOG_2PI, MixtureModel, logsumexp_rows

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class KktCertificate:
    """First-order optimality record of a weight solve.

    Attributes:
        residual: ``max_i pi_i |g_i + 1|`` at the returned weights.
        iterations: number of fixed-point updates applied.
        converged: whether ``residual <= 2 * eps_prime`` was reached.
        loss_history: loss on the solver's nodes before each update and at the end.
    """

    residual: float
    iterations: int
    converged: bool
    loss_history: Tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not self.residual >= 0:
            raise InvalidArgument("residual must be nonnegative")


def kkt_residual(weights, grad_weights) -> float:
    """max_i pi_i |g_i + 1|."""
    weights = np.asarray(weights, dtype=np.float64)
    grad_weights = np.asarray(grad_weights, dtype=np.float64)
    if weights.shape != grad_weights.shape:
        raise InvalidArgument("weights and gradient shapes differ")
    return float(np.max(weights * np.abs(grad_weights + 1.0)))


class WeightSubproblem:
    """Loss and gradients in the weights for fixed means on a fixed node set.

    Component densities are computed once, stored component-major as (n, N);
    every evaluation afterwards is two matrix-vector products.
    """

    def __init__(self, nodes: NodeSet, means: np.ndarray):
        if nodes.log_target is None:
            raise InvalidArgument("node set must carry the target log density")
        self.nodes = nodes
        self.means = np.asarray(means, dtype=np.float64)
        X = nodes.X
        n, d = self.means.shape
        log_phi = np.empty((n, X.shape[0]))
        for i, mu in enumerate(self.means):
            diff = X - mu
            np.einsum("ij,ij->i", diff, diff, out=log_phi[i])
        log_phi *= -0.5
        log_phi -= 0.5 * d * LOG_2PI
        self.log_phi = log_phi
        self.shift = log_phi.max(axis=0)
        self.A = np.exp(log_phi - self.shift)

    def _log_mix(self, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (log p, B) with ``B[i, k] = w_k phi_i(x_k) / p(x_k)``."""
        q = weights @ self.A
        if np.all(q > 0):
            return self.shift + np.log(q), self.A * (self.nodes.w / q)
        with np.errstate(divide="ignore"):
            log_w = np.log(weights)
        log_p, _ = logsumexp_rows((self.log_phi + log_w[:, None]).T)
        return log_p, np.exp(self.log_phi - log_p) * self.nodes.w

    def evaluate(self, weights: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """(loss, weight gradient, B) at ``weights``."""
        log_p, B = self._log_mix(weights)
        loss = float(self.nodes.w @ (self.nodes.log_target - log_p))
        return loss, -B.sum(axis=1), B

    def grad_means(self, weights: np.ndarray, B: np.ndarray) -> np.ndarray:
        """E[psi_i (mu_i - x)] from the ``B`` returned by :meth:`evaluate`."""
        mass = weights * B.sum(axis=1)
        first = weights[:, None] * (B @ self.nodes.X)
        return mass[:, None] * self.means - first

    def solve(self, init_weights, eps_prime: float, max_iters: int) -> Tuple[np.ndarray, KktCertificate]:
        pi = _check_simplex(init_weights, self.means.shape[0])
        if not eps_prime > 0:
            raise InvalidArgument("eps_prime must be positive")
        if max_iters < 0:
            raise InvalidArgument("max_iters must be >= 0")
        history: List[float] = []
        it = 0
        while True:
            loss, g, _ = self.evaluate(pi)
            history.append(loss)
            residual = kkt_residual(pi, g)
            if residual <= 2.0 * eps_prime or it >= max_iters:
                break
            new = pi * (-g)
            pi = new / new.sum()
            it += 1
        cert = KktCertificate(residual, it, residual <= 2.0 * eps_prime, tuple(history))
        return pi, cert


def _check_simplex(weights, n: int) -> np.ndarray:
    pi = np.array(weights, dtype=np.float64)
    if pi.shape != (n,):
        raise InvalidArgument(f"expected {n} weights, got shape {pi.shape}")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        raise InvalidArgument("init weights must lie on the simplex")
    return pi


def solve_weights(truth: MixtureModel, means, init_weights, est: Estimator, eps_prime: float,
                  max_iters: int = 10_000) -> Tuple[np.ndarray, KktCertificate]:
    """Fixed-point weight iteration until ``max_i pi_i |g_i + 1| <= 2 eps_prime``.

    Hitting ``max_iters`` is not an error: the last iterate, which has the
    lowest loss seen, is returned with ``converged=False``.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 1:
        means = means.reshape(-1, 1)
    if means.shape[1] != truth.dim:
        raise InvalidArgument("means dimension does not match truth")
    problem = WeightSubproblem(population_nodes(est, truth), means)
    return problem.solve(init_weights, eps_prime, max_iters)
