"""Isotropic Gaussian mixture models.

A :class:`MixtureModel` holds ``n`` means in ``R^d`` and mixing weights on the
probability simplex; every component has identity covariance. The same type
describes the ground truth (``m`` components) and the fitted model (``n``
components).

All densities are evaluated in log space with a max shift, because well
separated mixtures push raw exponentials far below the float64 range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from gmmlab.errors import InvalidArgument, InvalidModel

LOG_2PI = math.log(2.0 * math.pi)
SAMPLE_BATCH = 1 << 16
WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Mixture of unit-covariance Gaussians.

    Attributes:
        means: array of shape (n, d).
        weights: array of shape (n,), nonnegative, summing to one.
    """

    means: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64, copy=True)
        weights = np.array(self.weights, dtype=np.float64, copy=True)
        if means.ndim == 1:
            means = means.reshape(-1, 1)
        if means.ndim != 2 or means.shape[0] == 0 or means.shape[1] == 0:
            raise InvalidModel(f"means must be a non-empty (n, d) array, got shape {means.shape}")
        if weights.shape != (means.shape[0],):
            raise InvalidModel(
                f"weights shape {weights.shape} does not match {means.shape[0]} means")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(weights))):
            raise InvalidModel("means and weights must be finite")
        if np.any(weights < 0):
            raise InvalidModel("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidModel(f"weights sum to {weights.sum()!r}, not 1")
        means.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_unnormalized(cls, means, weights) -> "MixtureModel":
        """Build a model after rescaling ``weights`` onto the simplex."""
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if not total > 0:
            raise InvalidModel("all weights are zero")
        return cls(means, w / total)

    @classmethod
    def uniform(cls, means) -> "MixtureModel":
        means = np.asarray(means, dtype=np.float64)
        k = means.shape[0]
        return cls(means, np.full(k, 1.0 / k))

    def with_params(self, means=None, weights=None) -> "MixtureModel":
        return MixtureModel(self.means if means is None else means,
                            self.weights if weights is None else weights)

    def permuted(self, order: Sequence[int]) -> "MixtureModel":
        order = np.asarray(order)
        return MixtureModel(self.means[order], self.weights[order])

    def translated(self, shift) -> "MixtureModel":
        return MixtureModel(self.means + np.asarray(shift, dtype=np.float64), self.weights)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "weights": self.weights.tolist(), "means": self.means.tolist()}

    def to_json(self) -> str:
        """Serialize with 17 significant digits so floats round-trip exactly."""
        weights = ", ".join(format_float(w) for w in self.weights)
        means = ", ".join("[" + ", ".join(format_float(v) for v in row) + "]"
                          for row in self.means)
        return f'{{"dim": {self.dim}, "weights": [{weights}], "means": [{means}]}}\n'

    @classmethod
    def from_dict(cls, obj: dict) -> "MixtureModel":
        means = np.asarray(obj["means"], dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != int(obj["dim"]):
            raise InvalidModel("means do not match the declared dim")
        return cls(means, obj["weights"])

    @classmethod
    def from_json(cls, text: str) -> "MixtureModel":
        return cls.from_dict(json.loads(text))


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def _as_points(model: MixtureModel, x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim <= 1
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != model.dim:
        raise InvalidArgument(f"points of dimension {arr.shape[-1]} do not match model dim {model.dim}")
    return arr, single


def sq_distances(X: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Squared distances, shape (N, n), from explicit differences."""
    out = np.empty((X.shape[0], means.shape[0]))
    for i, mu in enumerate(means):
        diff = X - mu
        np.einsum("ij,ij->i", diff, diff, out=out[:, i])
    return out


def log_component_densities(model: MixtureModel, X: np.ndarray) -> np.ndarray:
    """log phi(mu_i; x) for every point and component, shape (N, n)."""
    return -0.5 * (model.dim * LOG_2PI + sq_distances(X, model.means))


def log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(weights)


def _joint_logits(model: MixtureModel, X: np.ndarray) -> np.ndarray:
    if not np.any(model.weights > 0):
        raise InvalidModel("all weights are zero")
    return log_component_densities(model, X) + log_weights(model.weights)


def logsumexp_rows(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp. Returns (lse, shifted exponentials)."""
    shift = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - shift)
    total = expd.sum(axis=1, keepdims=True)
    return (shift + np.log(total))[:, 0], expd / total


def log_density(model: MixtureModel, x):
    """log p(x) for one point (returns float) or a batch (returns array)."""
    X, single = _as_points(model, x)
    lse, _ = logsumexp_rows(_joint_logits(model, X))
    return float(lse[0]) if single else lse


def posterior(model: MixtureModel, x) -> np.ndarray:
    """Membership weights psi_i(x); shape (n,) for one point, (N, n) for a batch."""
    X, single = _as_points(model, x)
    _, psi = logsumexp_rows(_joint_logits(model, X))
    return psi[0] if single else psi


def log_density_and_posterior(model: MixtureModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X, _ = _as_points(model, X)
    return logsumexp_rows(_joint_logits(model, X))


def _generator(*key: int) -> np.random.Generator:
    # Counter-based stream keyed by integers: each batch can be drawn independently.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def sample(model: MixtureModel, seed: int, count: int, return_labels: bool = False):
    """Ancestral sampling: component by weight, then N(mu, I).

    Draws happen in fixed batches of ``SAMPLE_BATCH`` points, each from its own
    Philox stream, so batch ``b`` can be regenerated alone from ``(seed, b)``.
    """
    if count < 0:
        raise InvalidArgument("count must be >= 0")
    X = np.empty((count, model.dim))
    labels = np.empty(count, dtype=np.int64)
    for b, start in enumerate(range(0, count, SAMPLE_BATCH)):
        stop = min(count, start + SAMPLE_BATCH)
        rng = _generator(seed, b)
        lab = rng.choice(model.n, size=stop - start, p=model.weights)
        X[start:stop] = model.means[lab] + rng.standard_normal((stop - start, model.dim))
        labels[start:stop] = lab
    if return_labels:
        return X, labels
    return X


def sample_component(mean, seed: int, count: int, stream: int = 0) -> np.ndarray:
    """Draw ``count`` points from N(mean, I); ``stream`` separates per-component draws."""
    mean = np.asarray(mean, dtype=np.float64)
    X = np.empty((count, mean.shape[0]))
    for b, start in enumerate(range(0, count, SAMPLE_BATCH)):
        stop = min(count, start + SAMPLE_BATCH)
        rng = _generator(seed, b, 1, stream)
        X[start:stop] = mean + rng.standard_normal((stop - start, mean.shape[0]))
    return X


@dataclass(frozen=True)
class Partition:
    """Assignment of each fit component to its nearest truth mean."""

    assign: Tuple[int, ...]
    m: int

    def group(self, ell: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assign) == ell)

    def groups(self):
        return [self.group(ell) for ell in range(self.m)]

    def group_weights(self, fit: MixtureModel) -> np.ndarray:
        """Aggregated fit weight per truth component."""
        return np.bincount(np.asarray(self.assign), weights=fit.weights, minlength=self.m)


def _check_dims(fit: MixtureModel, truth: MixtureModel):
    if fit.dim != truth.dim:
        raise InvalidArgument(f"dimension mismatch: fit {fit.dim} vs truth {truth.dim}")


def partition(fit: MixtureModel, truth: MixtureModel) -> Partition:
    """Nearest-truth assignment; ties go to the lowest truth index."""
    _check_dims(fit, truth)
    d2 = sq_distances(fit.means, truth.means)
    return Partition(tuple(int(j) for j in np.argmin(d2, axis=1)), truth.n)


def potential_U(fit: MixtureModel, truth: MixtureModel, part: Optional[Partition] = None) -> float:
    """Total squared distance of fit means to their assigned truth means."""
    _check_dims(fit, truth)
    if part is None:
        part = partition(fit, truth)
    diff = fit.means - truth.means[np.asarray(part.assign)]
    return float(np.sum(diff * diff))


def pairwise_distances(means: np.ndarray) -> np.ndarray:
    return np.sqrt(sq_distances(means, means))


def min_separation(truth: MixtureModel) -> float:
    if truth.n < 2:
        return math.inf
    dist = pairwise_distances(truth.means)
    return float(dist[np.triu_indices(truth.n, k=1)].min())


@dataclass(frozen=True)
class AssumptionReport:
    """Raw quantities behind the non-degeneracy, boundedness and separation assumptions.

    ``separation_terms`` are the three terms inside the max of the separation
    condition; ``separated_ok`` compares ``delta`` against ``C * max(terms)``
    with a caller-chosen constant ``C`` (default 1, a heuristic choice).
    """

    lambda_min: float
    lambda_max: float
    d_min: float
    d_max: float
    delta: float
    pi_min_star: float
    rank: int
    n: int
    separation_terms: Tuple[float, float, float]
    bounded_threshold: float
    rank_ok: bool
    bounded_ok: bool
    separated_ok: bool

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["separation_terms"] = list(self.separation_terms)
        return out


RANK_RTOL = 1e-10


def second_moment(model: MixtureModel) -> np.ndarray:
    return (model.means * model.weights[:, None]).T @ model.means


def check_assumptions(truth: MixtureModel, n: Optional[int] = None, C: float = 1.0) -> AssumptionReport:
    m, d = truth.n, truth.dim
    n = m if n is None else int(n)
    eig = np.linalg.eigvalsh(second_moment(truth))[::-1]
    lam_max = float(eig[0])
    rank = int(np.sum(eig > RANK_RTOL * max(lam_max, np.finfo(float).tiny)))
    lam_min = float(eig[m - 1]) if m <= d else 0.0
    norms = np.linalg.norm(truth.means, axis=1)
    d_min, d_max = float(norms.min()), float(norms.max())
    delta = min_separation(truth) if m >= 2 else 0.0
    pi_min = float(truth.weights.min())

    rank_ok = m <= d and rank == m and lam_min > 0
    kappa = lam_max / lam_min if lam_min > 0 else math.inf
    bounded_threshold = 4.0 * kappa * math.sqrt(d * n)
    bounded_ok = bool(d_min >= bounded_threshold)

    if lam_min > 0 and pi_min > 0 and d_max > 0:
        log_arg = d * n * m * d_max / (pi_min * lam_min)
        t1 = math.sqrt(max(math.log(log_arg), 0.0))
    else:
        t1 = math.inf
    t2 = math.sqrt(d_max * math.sqrt(d * n))
    t3 = math.sqrt(d / pi_min) if pi_min > 0 else math.inf
    terms = (t1, t2, t3)
    separated_ok = bool(m < 2 or delta >= C * max(terms))
    if m >= 2 and delta == 0.0:
        separated_ok = False
    return AssumptionReport(
        lambda_min=lam_min, lambda_max=lam_max, d_min=d_min, d_max=d_max,
        delta=float(delta), pi_min_star=pi_min, rank=rank, n=n,
        separation_terms=terms, bounded_threshold=bounded_threshold,
        rank_ok=bool(rank_ok), bounded_ok=bounded_ok, separated_ok=separated_ok)


def recenter(truth: MixtureModel) -> Tuple[MixtureModel, np.ndarray]:
    """Move the origin to the midpoint of the closest pair of truth means.

    Afterwards every mean norm lies in ``[delta / 2, D]`` where ``D`` is the
    largest pairwise distance.
    """
    if truth.n < 2:
        raise InvalidArgument("recenter needs at least two components")
    dist = pairwise_distances(truth.means)
    np.fill_diagonal(dist, np.inf)
    i, j = np.unravel_index(np.argmin(dist), dist.shape)
    offset = 0.5 * (truth.means[i] + truth.means[j])
    return truth.translated(-offset), offset


def generate_truth(m: int, d: int, scale: float, seed: int, weights="equal",
                   recentered: bool = False) -> MixtureModel:
    """Means i.i.d. N(0, scale^2 I).

    ``weights`` is ``"equal"``, ``"dirichlet"`` or an explicit sequence. With
    ``recentered`` (and m >= 2) the origin moves to the midpoint of the closest
    pair. That makes two means antipodal, so the second moment loses a rank.
    """
    if m < 1 or d < 1:
        raise InvalidArgument("m and d must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x6d75])))
    means = scale * rng.standard_normal((m, d))
    if isinstance(weights, str):
        if weights == "equal":
            w = np.full(m, 1.0 / m)
        elif weights == "dirichlet":
            w = rng.dirichlet(np.full(m, 5.0))
        else:
            raise InvalidArgument(f"unknown weight profile {weights!r}")
    else:
        w = np.asarray(weights, dtype=np.float64)
    model = MixtureModel.from_unnormalized(means, w)
    if recentered and m >= 2:
        model, _ = recenter(model)
    return model
