"""Gradients of the KL loss with respect to fit means and weights.

Two analytically equal forms are provided for the mean gradient:

* direct: ``E_{x ~ p*}[psi_i(x) (mu_i - x)]``;
* Stein: ``sum_j pi*_j E_{x ~ N(mu*_j, I)}[psi_i(x) sum_k psi_k(x) (mu_k - mu*_j)]``,
  obtained by integrating the direct form by parts against each truth component.

The weight gradient is the true KL gradient ``g_i = -E_{x ~ p*}[phi_i(x) / p(x)]``,
so the first-order optimality residual on the simplex is ``max_i pi_i |g_i + 1|``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from gmmlab.divergence import kl_on_nodes
from gmmlab.errors import InvalidArgument
from gmmlab.estimators import Estimator, NodeSet, gaussian_nodes, population_nodes
from gmmlab.model import (
    MixtureModel,
    log_component_densities,
    log_density_and_posterior,
)


class ConditioningWarning(RuntimeWarning):
    """Finite differences are dominated by rounding error."""


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Mean and weight gradients of the loss.

    Attributes:
        grad_means: (n, d) gradient with respect to the means.
        grad_weights: (n,) gradient with respect to the weights.
        estimator_stderr: largest standard error over the mean-gradient entries
            (zero for quadrature and for finite differences).
    """

    grad_means: np.ndarray
    grad_weights: np.ndarray
    estimator_stderr: float = 0.0


def _check_pair(truth: MixtureModel, fit: MixtureModel):
    if truth.dim != fit.dim:
        raise InvalidArgument(f"dimension mismatch: truth {truth.dim} vs fit {fit.dim}")


def grad_means_on_nodes(nodes: NodeSet, fit: MixtureModel, return_stderr: bool = False):
    """Direct-form mean gradient over a prepared node set."""
    _, psi = log_density_and_posterior(fit, nodes.X)
    # E[psi_i] mu_i - E[psi_i x]
    mass = psi.T @ nodes.w
    first = (psi * nodes.w[:, None]).T @ nodes.X
    grad = mass[:, None] * fit.means - first
    if not return_stderr:
        return grad
    # Per-sample values psi_i(x) (mu_i - x), shape (N, n, d).
    values = psi[:, :, None] * (fit.means[None, :, :] - nodes.X[:, None, :])
    _, se = nodes.mean(values)
    return grad, se


def grad_means_direct(truth: MixtureModel, fit: MixtureModel, est: Estimator, return_stderr: bool = False):
    """Mean gradient as E_{p*}[psi_i(x) (mu_i - x)]; rows indexed by fit component."""
    _check_pair(truth, fit)
    return grad_means_on_nodes(population_nodes(est, truth), fit, return_stderr)


def grad_means_stein(truth: MixtureModel, fit: MixtureModel, est: Estimator, return_stderr: bool = False):
    """Mean gradient in the Stein form, one expectation per truth component.

    In Monte Carlo mode each truth component gets its own independent stream.
    """
    _check_pair(truth, fit)
    grad = np.zeros_like(fit.means)
    var = np.zeros_like(fit.means)
    for j, (pi_j, mu_j) in enumerate(zip(truth.weights, truth.means)):
        if pi_j == 0:
            continue
        nodes = gaussian_nodes(est, mu_j, stream=j)
        _, psi = log_density_and_posterior(fit, nodes.X)
        drift = psi @ (fit.means - mu_j)
        values = psi[:, :, None] * drift[:, None, :]
        mean, se = nodes.mean(values)
        grad += pi_j * mean
        var += (pi_j * se) ** 2
    if return_stderr:
        return grad, np.sqrt(var)
    return grad


def grad_weights_on_nodes(nodes: NodeSet, fit: MixtureModel, return_stderr: bool = False):
    """g_i = -E[phi_i / p] over a prepared node set."""
    log_p, _ = log_density_and_posterior(fit, nodes.X)
    ratio = np.exp(log_component_densities(fit, nodes.X) - log_p[:, None])
    g, se = nodes.mean(-ratio)
    return (g, se) if return_stderr else g


def grad_weights(truth: MixtureModel, fit: MixtureModel, est: Estimator, return_stderr: bool = False):
    """Weight gradient g_i = -E_{p*}[phi(mu_i; x) / p(x)].

    Zero-weight components get a well-defined gradient because the ratio is
    formed from component densities, not from posteriors.
    """
    _check_pair(truth, fit)
    return grad_weights_on_nodes(population_nodes(est, truth), fit, return_stderr)


def gradient_bundle(truth: MixtureModel, fit: MixtureModel, est: Estimator) -> GradientBundle:
    _check_pair(truth, fit)
    nodes = population_nodes(est, truth)
    gm, se = grad_means_on_nodes(nodes, fit, return_stderr=True)
    gw = grad_weights_on_nodes(nodes, fit)
    return GradientBundle(gm, gw, float(np.max(se)) if se.size else 0.0)


def _central(f_plus: float, f_minus: float, f0: float, h: float, what: str) -> float:
    if abs(f_plus - f_minus) < 1e3 * np.finfo(float).eps * abs(f0):
        warnings.warn(f"finite difference for {what} is below rounding level; increase h",
                      ConditioningWarning, stacklevel=3)
    return (f_plus - f_minus) / (2.0 * h)


def fd_gradient(truth: MixtureModel, fit: MixtureModel, est: Estimator, h: float) -> GradientBundle:
    """Central finite differences of the loss on one fixed node set.

    All evaluations share the same nodes, so Monte Carlo noise cancels in the
    differences. Each weight pair ``(pi_i, pi_{i+1 mod n})`` is perturbed by
    ``(+h, -h)``, which stays on the simplex and measures ``g_i - g_{i+1}``;
    the full gradient is recovered with the identity ``sum_i pi_i g_i = -1``.
    """
    if not h > 0:
        raise InvalidArgument("h must be positive")
    _check_pair(truth, fit)
    nodes = population_nodes(est, truth)

    def loss(means, weights) -> float:
        return kl_on_nodes(nodes, MixtureModel(means, weights)).value

    f0 = loss(fit.means, fit.weights)
    n, d = fit.means.shape
    gm = np.zeros((n, d))
    for i in range(n):
        for a in range(d):
            plus, minus = fit.means.copy(), fit.means.copy()
            plus[i, a] += h
            minus[i, a] -= h
            gm[i, a] = _central(loss(plus, fit.weights), loss(minus, fit.weights), f0, h, f"mean[{i},{a}]")

    gw = -np.ones(n)
    if n > 1:
        diffs = np.zeros(n)
        for i in range(n):
            j = (i + 1) % n
            if fit.weights[j] < h or fit.weights[i] < h:
                raise InvalidArgument("every weight must be at least h for simplex differences")
            plus, minus = fit.weights.copy(), fit.weights.copy()
            plus[i] += h
            plus[j] -= h
            minus[i] -= h
            minus[j] += h
            diffs[i] = _central(loss(fit.means, plus), loss(fit.means, minus), f0, h, f"weights[{i},{j}]")
        # Rows: g_i - g_{i+1} = diffs_i, and sum_i pi_i g_i = -1.
        A = np.zeros((n + 1, n))
        A[np.arange(n), np.arange(n)] = 1.0
        A[np.arange(n), (np.arange(n) + 1) % n] = -1.0
        A[n] = fit.weights
        rhs = np.append(diffs, -1.0)
        gw = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return GradientBundle(gm, gw, 0.0)
