"""Exact Lyapunov drifts on finite-n states and the matching analytical bounds.

All drifts are computed by summing over every sampled pair, O(n^2) per state.
These are verification oracles, not simulation code.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np
from numpy.typing import NDArray

from .model import QueueState, Scheme, SchemeKind


class Stability(str, Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"


def _queues(q: QueueState | NDArray[np.int64]) -> NDArray[np.int64]:
    if isinstance(q, QueueState):
        return q.queues
    arr = np.asarray(q)
    # cheap path for the common case; QueueState does the full validation otherwise
    if arr.dtype == np.int64 and arr.ndim == 1 and arr.size >= 2 and arr.min() >= 0:
        return arr
    return QueueState(arr).queues


@numba.njit(cache=True)
def _pair_sums(q, windowed, g, eps):
    """``sum_{j != i} p(Q_i, Q_j)`` for every ``i`` by direct pair enumeration."""
    n = q.size
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if j == i:
                continue
            d = q[i] - q[j]
            if d == 0:
                if i < j:
                    acc += 1.0
            else:
                e = 0.0 if windowed and abs(d) > g else eps
                acc += 1.0 - e if d < 0 else e
        out[i] = acc
    return out


@numba.njit(cache=True)
def _generator_sum_sq(q, r_plus):
    total = 0.0
    for i in range(q.size):
        total += r_plus[i] * (2.0 * q[i] + 1.0)
        if q[i] > 0:
            total += 1.0 - 2.0 * q[i]
    return total


def _rates(queues: NDArray[np.int64], scheme: Scheme, lam: float) -> NDArray[np.float64]:
    n = queues.size
    if scheme.kind is SchemeKind.RANDOM:
        return np.full(n, lam)
    sums = _pair_sums(queues, scheme.kind is SchemeKind.LOAD_DEPENDENT, scheme.g, scheme.effective_eps)
    return 2.0 * lam / (n - 1) * sums


def arrival_rates(q: QueueState | NDArray[np.int64], scheme: Scheme, lam: float) -> NDArray[np.float64]:
    """Per-server arrival rates ``2 lam/(n-1) * sum_{j != i} p(Q_i, Q_j)``."""
    return _rates(_queues(q), scheme, lam)


def exact_drift_V(q: QueueState | NDArray[np.int64], scheme: Scheme, lam: float) -> float:
    """Generator of ``V(Q) = sum_i Q_i^2`` applied at ``Q``.

    Arrivals raise ``Q_i^2`` by ``2 Q_i + 1`` and departures lower it by ``2 Q_i - 1``.
    """
    queues = _queues(q)
    return float(_generator_sum_sq(queues, _rates(queues, scheme, lam)))


def drift_bound_V(q: QueueState | NDArray[np.int64], scheme: Scheme, lam: float) -> float:
    """Closed-form upper bound on :func:`exact_drift_V` for the scheme."""
    queues = _queues(q)
    n = queues.size
    total = float(queues.sum())
    busy = float(np.count_nonzero(queues))
    if scheme.kind is SchemeKind.LOAD_DEPENDENT:
        extra = 2.0 * n * lam * scheme.g * (scheme.eps > 0.5)
        return 2.0 * (lam - 1.0) * total + extra + n * lam + busy
    growth = max(1.0, 2.0 * scheme.effective_eps) if scheme.kind is not SchemeKind.RANDOM else 1.0
    return 2.0 * (lam * growth - 1.0) * total + n * lam + busy


def exact_drift_V2(q: QueueState | NDArray[np.int64], scheme: Scheme, lam: float) -> float:
    """Generator of ``V2(Q) = Q_{i*}`` with ``i*`` the first index of a longest queue."""
    if scheme.kind not in (SchemeKind.LOAD_INDEPENDENT, SchemeKind.EXACT_PO2):
        raise ValueError("V2 drift is defined for the load-independent error model only")
    queues = _queues(q)
    i_star = int(np.argmax(queues))
    r_plus = _rates(queues, scheme, lam)[i_star]
    return float(r_plus - (queues[i_star] > 0))


def v2_lower_bound(scheme: Scheme, lam: float) -> float:
    return 2.0 * scheme.effective_eps * lam - 1.0


@dataclass(frozen=True)
class DriftReport:
    n: int
    total: int
    busy: int
    drift_V: float
    bound_V: float
    bound_satisfied: bool
    drift_V2: float | None = None
    bound_V2: float | None = None


def drift_report(q: QueueState | NDArray[np.int64], scheme: Scheme, lam: float, atol: float = 1e-9) -> DriftReport:
    state = q if isinstance(q, QueueState) else QueueState(q)
    exact = exact_drift_V(state, scheme, lam)
    bound = drift_bound_V(state, scheme, lam)
    ok = bool(exact <= bound + atol * max(1.0, abs(bound)))
    d2 = b2 = None
    if scheme.kind is SchemeKind.LOAD_INDEPENDENT and scheme.eps > 0.5:
        d2 = exact_drift_V2(state, scheme, lam)
        b2 = v2_lower_bound(scheme, lam)
        ok = ok and bool(d2 >= b2 - atol)
    return DriftReport(state.n, state.total, state.busy, exact, bound, ok, d2, b2)


def pair_bound(scheme: Scheme, q_i: NDArray | int, q_j: NDArray | int):
    """Upper bound on ``Q_i p(Q_i,Q_j) + Q_j p(Q_j,Q_i)`` for the scheme."""
    s = np.asarray(q_i, dtype=np.float64) + np.asarray(q_j, dtype=np.float64)
    if scheme.kind is SchemeKind.LOAD_DEPENDENT:
        return s / 2.0 + scheme.g * (scheme.eps > 0.5)
    return s * max(0.5, scheme.effective_eps)


@dataclass(frozen=True)
class LemmaReport:
    scheme: Scheme
    qmax: int
    pairs_checked: int
    min_slack: float
    passed: bool
    violation: tuple[int, int, bool] | None = None


def lemma_bound_check(scheme: Scheme, qmax: int, atol: float = 1e-12) -> LemmaReport:
    """Exhaustively check the pairwise lemma on ``[0, qmax]^2`` in both index orders."""
    if qmax < 1:
        raise ValueError("qmax must be >= 1")
    grid = np.arange(qmax + 1)
    qi, qj = np.meshgrid(grid, grid, indexing="ij")
    qi = qi.ravel()
    qj = qj.ravel()
    bound = pair_bound(scheme, qi, qj)
    worst = np.inf
    violation = None
    for i_first in (True, False):
        # server i listed first means it has the smaller index
        p_ij = _pair_probability(scheme, qi, qj, i_first)
        p_ji = _pair_probability(scheme, qj, qi, not i_first)
        lhs = qi * p_ij + qj * p_ji
        slack = bound - lhs
        k = int(np.argmin(slack))
        if slack[k] < worst:
            worst = float(slack[k])
        if slack[k] < -atol and violation is None:
            violation = (int(qi[k]), int(qj[k]), i_first)
    return LemmaReport(scheme, qmax, 2 * qi.size, worst, violation is None, violation)


def _pair_probability(scheme: Scheme, qi: NDArray, qj: NDArray, i_precedes_j: bool) -> NDArray[np.float64]:
    if scheme.kind is SchemeKind.RANDOM:
        return np.full(qi.shape, 0.5)
    eps = np.full(qi.shape, scheme.effective_eps)
    if scheme.kind is SchemeKind.LOAD_DEPENDENT:
        eps = np.where(np.abs(qi - qj) > scheme.g, 0.0, eps)
    p = np.where(qi < qj, 1.0 - eps, eps)
    return np.where(qi == qj, 1.0 if i_precedes_j else 0.0, p)


def classify_stability(scheme: Scheme, lam: float) -> Stability:
    """Stable iff ``lam`` is strictly below the scheme's stability bound."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return Stability.STABLE if lam < scheme.stability_bound() else Stability.UNSTABLE
