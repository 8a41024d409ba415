"""KL and chi-square divergences between isotropic mixtures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from gmmlab.errors import InvalidArgument, SandwichUnavailable, UnsupportedMode
from gmmlab.estimators import (
    GRID_PAD,
    Estimator,
    NodeSet,
    Quadrature1D,
    gauss_legendre,
    population_nodes,
)
from gmmlab.model import MixtureModel, Partition, log_density


@dataclass(frozen=True)
class LossEstimate:
    """KL estimate in nats; ``stderr`` is zero for quadrature."""

    value: float
    stderr: float

    def __post_init__(self):
        if not self.stderr >= 0 and not np.isnan(self.stderr):
            raise InvalidArgument("stderr must be nonnegative")


def _check_pair(truth: MixtureModel, fit: MixtureModel):
    if truth.dim != fit.dim:
        raise InvalidArgument(f"dimension mismatch: truth {truth.dim} vs fit {fit.dim}")


def kl_on_nodes(nodes: NodeSet, fit: MixtureModel, nonneg: bool = False) -> LossEstimate:
    """KL(p* || p) from precomputed truth nodes.

    With ``nonneg`` the integrand is ``r - 1 - log r`` for ``r = p / p*``. It has
    the same expectation (because E_{p*}[r] = 1), is pointwise nonnegative and has
    much lower variance near the optimum. It is only meaningful for Monte Carlo
    nodes; quadrature always uses the plain log-ratio.
    """
    log_ratio = nodes.log_target - log_density(fit, nodes.X)
    if nonneg and nodes.monte_carlo:
        values = np.expm1(-log_ratio) + log_ratio
    else:
        values = log_ratio
    est, se = nodes.mean(values)
    return LossEstimate(float(est), float(se))


def kl_loss(truth: MixtureModel, fit: MixtureModel, est: Estimator, nonneg: bool = False) -> LossEstimate:
    """KL(p* || p) = E_{p*}[log p*(x) - log p(x)]."""
    _check_pair(truth, fit)
    if isinstance(est, Quadrature1D):
        if truth.dim != 1:
            raise UnsupportedMode("quadrature KL needs d = 1")
        if not (est.covers(truth) and est.covers(fit)):
            raise InvalidArgument("quadrature grid must cover every mean +/- 12")
    return kl_on_nodes(population_nodes(est, truth), fit, nonneg=nonneg)


def _grid_for(models, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    # The chi-square integrand p^2/q peaks near 2a - b, so pad by the spread as well.
    means = np.concatenate([m.means.ravel() for m in models])
    spread = means.max() - means.min()
    est = Quadrature1D(means.min() - GRID_PAD - spread, means.max() + GRID_PAD + spread, nodes)
    return gauss_legendre(est)


def _require_1d(*models: MixtureModel):
    for m in models:
        if m.dim != 1:
            raise UnsupportedMode(f"one-dimensional models required, got d = {m.dim}")


def chi_square_1d(p: MixtureModel, q: MixtureModel, nodes: int = 4096) -> float:
    """chi^2(p || q) = integral of (p - q)^2 / q, by quadrature."""
    _require_1d(p, q)
    x, gw = _grid_for((p, q), nodes)
    X = x.reshape(-1, 1)
    log_p, log_q = log_density(p, X), log_density(q, X)
    return float(np.sum(gw * np.exp(2.0 * _log_abs_diff(log_p, log_q) - log_q)))


def _log_abs_diff(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    """log |a - b| from log a and log b; -inf where a == b."""
    hi, lo = np.maximum(log_a, log_b), np.minimum(log_a, log_b)
    with np.errstate(divide="ignore"):
        return hi + np.log(-np.expm1(lo - hi))


IDENTITY_LOG_FLOOR = -60.0
IDENTITY_TAIL = 40.0
IDENTITY_MAX_SPACING = 0.25
IDENTITY_CHUNK = 64


@dataclass(frozen=True)
class IdentityCheck:
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


def kl_chi2_identity_check(p: MixtureModel, q: MixtureModel, lam: float, steps: int = 200,
                           nodes: int = 4096, max_spacing: float = IDENTITY_MAX_SPACING) -> IdentityCheck:
    """Compare KL(p || p_lam) with the integral of chi^2(p || p_s) / s over [0, lam].

    Here ``p_s = (1 - s) p + s q``. The left side is one quadrature in x. The
    right side is composite Simpson in ``u`` after substituting
    ``s = lam * sigmoid(u)``, with each chi-square again by quadrature in x.
    Far-apart components make the s-integrand vary on scales as small as
    ``q/p`` near s = 0 and s = 1; in ``u`` those scales are evenly spaced. The
    u-range covers every log density ratio that carries mass, and the panel
    count is ``steps`` or more so the u-spacing stays below ``max_spacing``.
    Since p - p_s = s (p - q), the s-integrand is ``s * integral (p - q)^2 / p_s``
    and vanishes as s -> 0.
    """
    _require_1d(p, q)
    if not 0.0 < lam <= 1.0:
        raise InvalidArgument("lambda must lie in (0, 1]")
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    x, gw = _grid_for((p, q), nodes)
    X = x.reshape(-1, 1)
    log_p, log_q = log_density(p, X), log_density(q, X)

    with np.errstate(divide="ignore"):
        log_1m_lam = np.log1p(-lam)
        log_mix_lam = np.logaddexp(log_1m_lam + log_p, np.log(lam) + log_q)
    lhs = float(np.sum(gw * np.exp(log_p) * (log_p - log_mix_lam)))

    massive = np.maximum(log_p, log_q) > IDENTITY_LOG_FLOOR
    span = float(np.max(np.abs(log_p - log_q)[massive], initial=0.0)) + IDENTITY_TAIL
    panels = max(steps, int(np.ceil(span / max_spacing)))
    u = np.linspace(-span, span, 2 * panels + 1)
    log_sig = -np.logaddexp(0.0, -u)
    log_sig_neg = -np.logaddexp(0.0, u)
    log_s = np.log(lam) + log_sig
    # log(1 - lam * sigmoid(u)) = log(1 - lam + e^{-u}) - log(1 + e^{-u}), exact at lam = 1.
    log_1m_s = np.logaddexp(log_1m_lam, -u) + log_sig
    log_jac = np.log(lam) + log_sig + log_sig_neg
    log_diff2 = 2.0 * _log_abs_diff(log_p, log_q)
    keep = np.isfinite(log_diff2)
    lg = np.log(gw[keep]) + log_diff2[keep]
    integrand = np.empty_like(u)
    for c in range(0, u.size, IDENTITY_CHUNK):
        sl = slice(c, c + IDENTITY_CHUNK)
        log_ps = np.logaddexp(log_1m_s[sl, None] + log_p[None, keep], log_s[sl, None] + log_q[None, keep])
        terms = lg[None, :] - log_ps
        top = terms.max(axis=1) if terms.size else np.full(terms.shape[0], -np.inf)
        safe = np.where(np.isfinite(top), top, 0.0)
        with np.errstate(divide="ignore"):
            log_int = safe + np.log(np.sum(np.exp(terms - safe[:, None]), axis=1))
        integrand[sl] = np.exp(log_s[sl] + log_int + log_jac[sl])
    h = (u[-1] - u[0]) / (2 * panels)
    simpson = np.ones_like(u)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    rhs = float(h / 3.0 * np.dot(simpson, integrand))
    return IdentityCheck(lhs, rhs)


def loss_sandwich(truth: MixtureModel, fit: MixtureModel, part: Partition) -> Tuple[float, float]:
    """Analytic bounds on KL from the partition of fit components.

    ``lower`` drops the additive exp(-Theta(Delta^2)) slack (unknown constant),
    so it is a large-separation proxy rather than a strict bound. ``upper``
    holds for any instance with every group non-empty.
    """
    _check_pair(truth, fit)
    assign = np.asarray(part.assign)
    group_w = part.group_weights(fit)
    if np.any(np.bincount(assign, minlength=truth.n) == 0) or np.any(group_w <= 0):
        raise SandwichUnavailable("every truth component needs a fit group with positive weight")
    pi_star = truth.weights
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi_star > 0, pi_star * np.log(pi_star / group_w), 0.0)
    lower = float(terms.sum())
    dist2 = np.sum((fit.means - truth.means[assign]) ** 2, axis=1)
    scale = pi_star[assign] / group_w[assign]
    upper = lower + float(np.sum(fit.weights * scale * 0.5 * dist2))
    return lower, upper
