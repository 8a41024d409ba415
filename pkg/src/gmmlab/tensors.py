"""Symmetric tensors, moment tensors, whitening and identifiability diagnostics.

Tensors are stored densely as ``d**k`` arrays. Orders up to 4 and dimensions
up to about 10 are the intended range.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from gmmlab.errors import InvalidArgument, WhiteningFailed
from gmmlab.model import RANK_RTOL, MixtureModel, Partition, format_float, second_moment

MAX_ORDER = 4
_LETTERS = "abcdefgh"


@dataclass(frozen=True, eq=False)
class SymTensor:
    """Dense symmetric tensor of order ``k`` over ``R^d``."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.array(self.entries, dtype=np.float64, copy=True)
        if arr.ndim > 0 and len(set(arr.shape)) != 1:
            raise InvalidArgument(f"tensor must be cubical, got shape {arr.shape}")
        if arr.ndim > MAX_ORDER:
            raise InvalidArgument(f"order {arr.ndim} exceeds {MAX_ORDER}")
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)

    @property
    def order(self) -> int:
        return self.entries.ndim

    @property
    def dim(self) -> int:
        return self.entries.shape[0] if self.order else 0

    def _check(self, other: "SymTensor"):
        if self.entries.shape != other.entries.shape:
            raise InvalidArgument(f"tensor shapes differ: {self.entries.shape} vs {other.entries.shape}")

    def __add__(self, other: "SymTensor") -> "SymTensor":
        self._check(other)
        return SymTensor(self.entries + other.entries)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        self._check(other)
        return SymTensor(self.entries - other.entries)

    def __mul__(self, c: float) -> "SymTensor":
        return SymTensor(self.entries * float(c))

    __rmul__ = __mul__

    def symmetry_defect(self) -> float:
        """Largest entry change under any transposition of two adjacent indices."""
        k = self.order
        worst = 0.0
        for a in range(k - 1):
            axes = list(range(k))
            axes[a], axes[a + 1] = axes[a + 1], axes[a]
            worst = max(worst, float(np.max(np.abs(self.entries - self.entries.transpose(axes)))))
        return worst

    def contract(self, v) -> float:
        """<T, v^{(x)k}>."""
        v = np.asarray(v, dtype=np.float64)
        out = self.entries
        for _ in range(self.order):
            out = out @ v
        return float(out)


def outer_power(v, k: int) -> SymTensor:
    v = np.asarray(v, dtype=np.float64).ravel()
    if not 0 <= k <= MAX_ORDER:
        raise InvalidArgument(f"order must lie in [0, {MAX_ORDER}]")
    out = np.ones(())
    for _ in range(k):
        out = np.multiply.outer(out, v)
    return SymTensor(out)


def inner(t1: SymTensor, t2: SymTensor) -> float:
    t1._check(t2)
    return float(np.sum(t1.entries * t2.entries))


def frob(t: SymTensor) -> float:
    return float(np.sqrt(np.sum(t.entries * t.entries)))


def _apply(T: np.ndarray, V: np.ndarray, times: int) -> np.ndarray:
    """Contract the last ``times`` axes of T with each row of V (shape (R, d))."""
    k = T.ndim
    if times == 0:
        return np.broadcast_to(T, (V.shape[0],) + T.shape)
    head = _LETTERS[:k - times]
    tail = _LETTERS[k - times:k]
    spec = f"{head}{tail}," + ",".join(f"r{c}" for c in tail) + f"->r{head}"
    return np.einsum(spec, T, *([V] * times))


def _values(T: np.ndarray, V: np.ndarray) -> np.ndarray:
    return _apply(T, V, T.ndim)


def _normalize(V: np.ndarray) -> np.ndarray:
    return V / np.linalg.norm(V, axis=-1, keepdims=True)


def _ascend(T: np.ndarray, V: np.ndarray, iters: int) -> np.ndarray:
    """Normalized Riemannian gradient ascent of <T, v^k> on the sphere, per row of V."""
    k = T.ndim
    step = np.full(V.shape[0], 1.0 / max(np.sqrt(np.sum(T * T)), 1e-300))
    f = _values(T, V)
    for _ in range(iters):
        grad = k * _apply(T, V, k - 1)
        tangent = grad - np.sum(grad * V, axis=1, keepdims=True) * V
        cand = _normalize(V + step[:, None] * tangent)
        f_new = _values(T, cand)
        better = f_new >= f
        V = np.where(better[:, None], cand, V)
        f = np.where(better, f_new, f)
        step = np.where(better, step * 2.0, step * 0.5)
    return V


def _newton_polish(T: np.ndarray, v: np.ndarray, steps: int = 8) -> np.ndarray:
    """Newton iterations on T v^{k-1} = lam v, |v| = 1."""
    k, d = T.ndim, T.shape[0]
    for _ in range(steps):
        tv = _apply(T, v[None, :], k - 1)[0]
        lam = float(tv @ v)
        H = (k - 1) * _apply(T, v[None, :], k - 2)[0] if k >= 2 else np.zeros((d, d))
        J = np.zeros((d + 1, d + 1))
        J[:d, :d] = H - lam * np.eye(d)
        J[:d, d] = -v
        J[d, :d] = -v
        F = np.append(tv - lam * v, 0.5 * (1.0 - v @ v))
        try:
            delta = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        v = v + delta[:d]
        v = v / np.linalg.norm(v)
    return v


def spectral_norm(T: SymTensor, restarts: int = 32, iters: int = 200, seed: int = 0,
                  return_vector: bool = False):
    """max over unit v of |<T, v^{(x)k}>|, by ascent from random starts.

    Each restart ``r`` draws its start from ``default_rng([seed, r])``. Even
    orders search both signs. The best start is refined by Newton's method on
    the eigenvector equations and the refinement is kept only if it improves
    the objective, so the result is always attained by some unit vector.
    """
    k, d = T.order, T.dim
    if k == 0:
        val = abs(float(T.entries))
        return (val, np.ones(0)) if return_vector else val
    if restarts < 1 or iters < 0:
        raise InvalidArgument("restarts must be >= 1 and iters >= 0")
    E = T.entries
    if not np.any(E):
        v = np.eye(d)[0]
        return (0.0, v) if return_vector else 0.0
    if k == 1:
        nrm = float(np.linalg.norm(E))
        return (nrm, E / nrm) if return_vector else nrm
    starts = np.stack([np.random.default_rng([seed, r]).standard_normal(d) for r in range(restarts)])
    starts = _normalize(starts)
    best_val, best_v = -np.inf, None
    for sign in ((1.0, -1.0) if k % 2 == 0 else (1.0,)):
        V = _ascend(sign * E, starts, iters)
        f = np.abs(_values(E, V))
        r = int(np.argmax(f))
        if f[r] > best_val:
            best_val, best_v = float(f[r]), V[r]
    polished = _newton_polish(E, best_v.copy())
    pol_val = abs(T.contract(polished))
    if np.isfinite(pol_val) and pol_val > best_val:
        best_val, best_v = pol_val, polished
    if frob(T) > 1.01 * d ** ((k - 1) / 2) * best_val:
        warnings.warn("spectral norm estimate violates the Frobenius bound; increase restarts",
                      RuntimeWarning, stacklevel=2)
    return (best_val, best_v) if return_vector else best_val


def moment_tensor(model: MixtureModel, k: int, means: Optional[np.ndarray] = None) -> SymTensor:
    """sum_i pi_i mu_i^{(x)k}; ``means`` overrides the model means (e.g. whitened)."""
    if not 0 <= k <= MAX_ORDER:
        raise InvalidArgument(f"order must lie in [0, {MAX_ORDER}]")
    M = model.means if means is None else np.asarray(means, dtype=np.float64)
    out = np.zeros((M.shape[1],) * k)
    for w, mu in zip(model.weights, M):
        if w:
            out = out + w * outer_power(mu, k).entries
    return SymTensor(out)


@dataclass(frozen=True, eq=False)
class WhiteningResult:
    """Whitening map for the truth second moment.

    Attributes:
        W: (d, d) matrix with ``W^T M2 W = diag(I_m, 0)``.
        rank: detected rank m.
        sigma: the m nonzero eigenvalues, descending.
    """

    W: np.ndarray
    rank: int
    sigma: np.ndarray

    def whiten_truth(self, truth: MixtureModel) -> np.ndarray:
        """sqrt(pi*_i) W^T mu*_i, one row per truth component."""
        return np.sqrt(truth.weights)[:, None] * (truth.means @ self.W)

    def whiten(self, means) -> np.ndarray:
        return np.asarray(means, dtype=np.float64) @ self.W


def whitening(truth: MixtureModel) -> WhiteningResult:
    """Eigendecompose M2 = V diag(sigma, 0) V^T and scale by sigma^{-1/2}.

    Directions outside the span of the truth means are scaled by the smallest
    nonzero eigenvalue so W stays invertible.
    """
    M2 = second_moment(truth)
    eig, V = np.linalg.eigh(M2)
    order = np.argsort(-eig, kind="stable")
    eig, V = eig[order], V[:, order]
    lam_max = max(float(eig[0]), np.finfo(float).tiny)
    rank = int(np.sum(eig > RANK_RTOL * lam_max))
    if rank < truth.n:
        raise WhiteningFailed(rank, truth.n)
    sigma = eig[:rank]
    scale = np.full(truth.dim, sigma[-1] ** -0.5)
    scale[:rank] = sigma ** -0.5
    return WhiteningResult(V * scale[None, :], rank, sigma.copy())


def whitening_defect(truth: MixtureModel, res: WhiteningResult) -> float:
    """||W^T M2 W - diag(I_m, 0)||_F."""
    target = np.zeros((truth.dim, truth.dim))
    target[:res.rank, :res.rank] = np.eye(res.rank)
    return float(np.linalg.norm(res.W.T @ second_moment(truth) @ res.W - target))


def decomposition_tensor(truth: MixtureModel, fit: MixtureModel, k: int, W: np.ndarray) -> SymTensor:
    """sum_l pi*_l^{1 - k/2} tm*_l^{(x)k} - sum_i pi_i tm_i^{(x)k}, with tm = whitened means."""
    if k not in (2, 3, 4):
        raise InvalidArgument("k must be 2, 3 or 4")
    W = np.asarray(W, dtype=np.float64)
    tm_star = np.sqrt(truth.weights)[:, None] * (truth.means @ W)
    scale = np.zeros_like(truth.weights)
    pos = truth.weights > 0
    scale[pos] = truth.weights[pos] ** (1.0 - k / 2.0)
    entries = np.zeros((truth.dim,) * k)
    for c, mu in zip(scale, tm_star):
        if c:
            entries += c * outer_power(mu, k).entries
    fit_part = moment_tensor(fit, k, fit.means @ W)
    return SymTensor(entries) - fit_part


def tensor_error(truth: MixtureModel, fit: MixtureModel, k: int, W: np.ndarray,
                 restarts: int = 32, iters: int = 200, seed: int = 0) -> float:
    """Spectral norm of the whitened decomposition error tensor of order k."""
    return spectral_norm(decomposition_tensor(truth, fit, k, W), restarts, iters, seed)


@dataclass(frozen=True, eq=False)
class IdDiagnostics:
    """Per truth component identifiability measures.

    Attributes:
        weighted_distance: sum over S_l of pi_i |mu_i - mu*_l|^2.
        group_weight_error: signed hat-pi_l - pi*_l.
        closeby_weight: weight of S_l within ``delta_close`` of mu*_l.
        avg_component_error: |sum over S_l of pi_i mu_i - pi*_l mu*_l|.
    """

    weighted_distance: np.ndarray
    group_weight_error: np.ndarray
    closeby_weight: np.ndarray
    avg_component_error: np.ndarray
    delta_close: float

    def as_rows(self) -> Iterable[Tuple[int, float, float, float, float]]:
        for ell in range(len(self.weighted_distance)):
            yield (ell, float(self.weighted_distance[ell]), float(self.group_weight_error[ell]),
                   float(self.closeby_weight[ell]), float(self.avg_component_error[ell]))


def id_diagnostics(truth: MixtureModel, fit: MixtureModel, part: Partition, delta_close: float) -> IdDiagnostics:
    if truth.dim != fit.dim:
        raise InvalidArgument("truth and fit dimensions differ")
    if delta_close < 0:
        raise InvalidArgument("delta_close must be nonnegative")
    m = truth.n
    assign = np.asarray(part.assign, dtype=np.int64)
    if assign.shape != (fit.n,):
        raise InvalidArgument("partition does not match the fit")
    diff = fit.means - truth.means[assign]
    dist2 = np.sum(diff * diff, axis=1)
    w = fit.weights
    weighted = np.bincount(assign, weights=w * dist2, minlength=m)
    group = np.bincount(assign, weights=w, minlength=m)
    close = np.bincount(assign, weights=w * (np.sqrt(dist2) <= delta_close), minlength=m)
    first = np.zeros_like(truth.means)
    np.add.at(first, assign, w[:, None] * fit.means)
    avg = np.linalg.norm(first - truth.weights[:, None] * truth.means, axis=1)
    return IdDiagnostics(weighted, group - truth.weights, close, avg, float(delta_close))


def default_delta_close(eps: float, const: float = 1.0) -> float:
    """Close-by radius ``const * eps**(1/4)``."""
    if eps < 0:
        raise InvalidArgument("eps must be nonnegative")
    return const * eps ** 0.25


DIAG_HEADER = ("snapshot_iter", "ell", "weighted_distance", "group_weight_error", "closeby_weight",
               "avg_component_error", "tensor_error_k2", "tensor_error_k3", "tensor_error_k4")


def diagnostics_csv(rows: Sequence[Tuple[int, IdDiagnostics, Sequence[float]]]) -> str:
    """CSV with one line per (snapshot, truth component).

    ``rows`` holds ``(snapshot_iter, diagnostics, (t2, t3, t4))`` per snapshot;
    tensor errors repeat on every line of their snapshot.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DIAG_HEADER)
    for it, diag, terr in rows:
        for ell, *vals in diag.as_rows():
            writer.writerow([it, ell] + [format_float(v) for v in (*vals, *terr)])
    return buf.getvalue()
