"""Probabilists' Hermite polynomials and Hermite tensors.

``He_k(x)`` for ``x`` in ``R^d`` is the order-k tensor whose contraction with
``v^{(x)k}`` equals ``|v|^k He_k(<v, x> / |v|)``. Contractions are computed
through that scalar reduction; dense tensors are built only for ``k <= 4``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from gmmlab.errors import InvalidArgument
from gmmlab.estimators import Estimator, gaussian_nodes
from gmmlab.tensors import SymTensor, outer_power

MAX_SCALAR_ORDER = 8
MAX_TENSOR_ORDER = 4
MAX_TENSOR_DIM = 6
_CHUNK = 1 << 14


def _check_order(k: int, limit: int):
    if not (isinstance(k, (int, np.integer)) and 0 <= k <= limit):
        raise InvalidArgument(f"order must be an integer in [0, {limit}], got {k!r}")


def he_scalar(k: int, u):
    """He_k(u) by the recurrence He_{j+1} = u He_j - j He_{j-1}."""
    _check_order(k, MAX_SCALAR_ORDER)
    u = np.asarray(u, dtype=np.float64)
    prev, cur = np.ones_like(u), u
    if k == 0:
        return prev if prev.ndim else float(prev)
    for j in range(1, k):
        prev, cur = cur, u * cur - j * prev
    return cur if cur.ndim else float(cur)


def he_contract(k: int, x, v):
    """<He_k(x), v^{(x)k}> for one point ``x`` (shape (d,)) or a batch (N, d).

    Uses the homogeneous form H_{j+1} = s H_j - j |v|^2 H_{j-1} with s = <v, x>,
    which equals |v|^k He_k(s / |v|) and needs no division, so v = 0 is exact.
    """
    _check_order(k, MAX_SCALAR_ORDER)
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape[-1] != v.shape[-1]:
        raise InvalidArgument("x and v dimensions differ")
    s = x @ v
    nv2 = float(v @ v)
    prev, cur = np.ones_like(s), s
    if k == 0:
        return prev if prev.ndim else float(prev)
    for j in range(1, k):
        prev, cur = cur, s * cur - j * nv2 * prev
    return cur if cur.ndim else float(cur)


def _pairings(k: int) -> List[Tuple[Tuple[int, int], ...]]:
    """All sets of disjoint index pairs from range(k), including the empty set."""
    out: List[Tuple[Tuple[int, int], ...]] = [()]
    pairs = list(itertools.combinations(range(k), 2))
    for r in range(1, k // 2 + 1):
        for combo in itertools.combinations(pairs, r):
            used = [i for p in combo for i in p]
            if len(set(used)) == len(used):
                out.append(combo)
    return out


def he_tensor(k: int, x) -> np.ndarray:
    """Dense He_k(x); shape (d,)*k for one point or (N,) + (d,)*k for a batch.

    He_k(x) = sum over partial pairings P of (-1)^|P| times the tensor with an
    identity on every pair of P and x on every unpaired index.
    """
    _check_order(k, MAX_TENSOR_ORDER)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d = X.shape[1]
    if d > MAX_TENSOR_DIM:
        raise InvalidArgument(f"dense Hermite tensors need d <= {MAX_TENSOR_DIM}")
    if k == 0:
        out = np.ones(X.shape[0])
        return out[0] if single else out
    letters = "abcd"[:k]
    eye = np.eye(d)
    out = np.zeros((X.shape[0],) + (d,) * k)
    for pairing in _pairings(k):
        paired = {i for p in pairing for i in p}
        operands, specs = [], []
        for a, b in pairing:
            operands.append(eye)
            specs.append(letters[a] + letters[b])
        for i in range(k):
            if i not in paired:
                operands.append(X)
                specs.append("n" + letters[i])
        if len(paired) == k:
            term = np.einsum(",".join(specs) + "->" + letters, *operands)[None]
        else:
            term = np.einsum(",".join(specs) + "->n" + letters, *operands)
        out += (-1) ** len(pairing) * term
    return out[0] if single else out


def _chunked_mean(nodes, fn) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted mean of fn(X) and its standard error, evaluated in chunks.

    Plain Monte Carlo nodes get the i.i.d. standard error; other node sets are
    evaluated in one pass through ``NodeSet.mean``.
    """
    if not nodes.monte_carlo or nodes.strata is not None:
        return nodes.mean(fn(nodes.X))
    # Sums are taken around the first chunk's mean to limit cancellation.
    N = nodes.size
    center = total = sq = None
    for start in range(0, N, _CHUNK):
        vals = fn(nodes.X[start:start + _CHUNK])
        if center is None:
            center = vals.mean(axis=0)
            total = np.zeros_like(center)
            sq = np.zeros_like(center)
        dev = vals - center
        total = total + dev.sum(axis=0)
        sq = sq + np.einsum("n...,n...->...", dev, dev)
    shift = total / N
    mean = center + shift
    if N < 2:
        return mean, np.zeros_like(mean)
    var = np.maximum(sq - N * shift * shift, 0.0) / (N - 1)
    return mean, np.sqrt(var / N)


@dataclass(frozen=True, eq=False)
class MomentCheck:
    lhs: SymTensor
    rhs: SymTensor
    stderr: np.ndarray

    @property
    def frob_gap(self) -> float:
        return float(np.linalg.norm((self.lhs.entries - self.rhs.entries).ravel()))

    @property
    def stderr_frob(self) -> float:
        return float(np.sqrt(np.sum(self.stderr ** 2)))


def moment_identity_check(k: int, mu, est: Estimator) -> MomentCheck:
    """Estimate E_{x ~ N(mu, I)}[He_k(x)] entrywise and compare with mu^{(x)k}."""
    _check_order(k, MAX_TENSOR_ORDER)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    if mu.shape[0] > MAX_TENSOR_DIM:
        raise InvalidArgument(f"dense Hermite tensors need d <= {MAX_TENSOR_DIM}")
    nodes = gaussian_nodes(est, mu)
    mean, se = _chunked_mean(nodes, lambda X: he_tensor(k, X))
    return MomentCheck(SymTensor(mean), outer_power(mu, k), se)


@dataclass(frozen=True)
class ScalarCheck:
    estimate: float
    target: float
    stderr: float

    @property
    def gap(self) -> float:
        return abs(self.estimate - self.target)


def orthogonality_target(j: int, k: int, s, t) -> float:
    """k! <s, t>^k when j == k, else 0."""
    if j != k:
        return 0.0
    return float(math.factorial(k) * float(np.dot(s, t)) ** k)


def orthogonality_check(j: int, k: int, s, t, est: Estimator) -> ScalarCheck:
    """E_{x ~ N(0, I)}[<He_j(x), s^j> <He_k(x), t^k>] against its closed form."""
    _check_order(j, MAX_TENSOR_ORDER)
    _check_order(k, MAX_TENSOR_ORDER)
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    nodes = gaussian_nodes(est, np.zeros_like(s))
    mean, se = _chunked_mean(nodes, lambda X: he_contract(j, X, s) * he_contract(k, X, t))
    return ScalarCheck(float(mean), orthogonality_target(j, k, s, t), float(se))


def translation_second_moment(k: int, mu, v) -> float:
    """E_{x ~ N(mu, I)}[<He_k(x), v^k>^2] in closed form.

    Equals sum_j j! C(k, j)^2 <mu, v>^{2k - 2j} |v|^{2j}.
    """
    _check_order(k, MAX_TENSOR_ORDER)
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    a, b = float(mu @ v), float(v @ v)
    return float(sum(math.factorial(j) * math.comb(k, j) ** 2 * a ** (2 * k - 2 * j) * b ** j
                     for j in range(k + 1)))


def translation_second_moment_check(k: int, mu, v, est: Estimator) -> ScalarCheck:
    """Monte Carlo or quadrature estimate of the translated second moment."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    nodes = gaussian_nodes(est, mu)
    mean, se = _chunked_mean(nodes, lambda X: he_contract(k, X, v) ** 2)
    return ScalarCheck(float(mean), translation_second_moment(k, mu, v), float(se))

