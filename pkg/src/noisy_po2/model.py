"""Dispatch schemes, pairwise join probabilities and tail measures.

A tail measure ``x`` stores ``x[k-1]`` = fraction of servers holding at least
``k`` jobs, for ``k = 1..B``.  Indices ``k <= 0`` read as 1 and ``k > B`` read
as 0; the sentinels are never stored.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import NDArray


class SchemeKind(str, Enum):
    LOAD_DEPENDENT = "po2-g"
    LOAD_INDEPENDENT = "po2-eps"
    RANDOM = "random"
    EXACT_PO2 = "po2"


class UnstableError(ValueError):
    """Raised when the arrival rate lies outside a scheme's stability region."""


class TruncationError(RuntimeError):
    """Raised when a truncated tail measure loses mass it should not lose."""


@dataclass(frozen=True)
class Scheme:
    kind: SchemeKind
    g: int = 0
    eps: float = 0.0

    def __post_init__(self) -> None:
        kind = SchemeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if isinstance(self.g, bool) or int(self.g) != self.g or self.g < 0:
            raise ValueError(f"g must be a nonnegative integer, got {self.g!r}")
        object.__setattr__(self, "g", int(self.g))
        eps = float(self.eps)
        if not (0.0 <= eps <= 1.0) or math.isnan(eps):
            raise ValueError(f"eps must lie in [0, 1], got {self.eps!r}")
        object.__setattr__(self, "eps", eps)
        if kind in (SchemeKind.RANDOM, SchemeKind.EXACT_PO2) and (self.g or eps):
            raise ValueError(f"{kind.value} takes no g/eps parameters")
        if kind is SchemeKind.LOAD_INDEPENDENT and self.g:
            raise ValueError("po2-eps takes no g parameter")

    @classmethod
    def load_dependent(cls, g: int, eps: float) -> Scheme:
        return cls(SchemeKind.LOAD_DEPENDENT, g, eps)

    @classmethod
    def load_independent(cls, eps: float) -> Scheme:
        return cls(SchemeKind.LOAD_INDEPENDENT, 0, eps)

    @classmethod
    def random(cls) -> Scheme:
        return cls(SchemeKind.RANDOM)

    @classmethod
    def exact_po2(cls) -> Scheme:
        return cls(SchemeKind.EXACT_PO2)

    @classmethod
    def from_name(cls, name: str, g: int = 0, eps: float = 0.0) -> Scheme:
        kind = SchemeKind(name)
        if kind is SchemeKind.LOAD_DEPENDENT:
            return cls.load_dependent(g, eps)
        if kind is SchemeKind.LOAD_INDEPENDENT:
            return cls.load_independent(eps)
        return cls(kind)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def effective_eps(self) -> float:
        return 0.0 if self.kind is SchemeKind.EXACT_PO2 else self.eps

    def label(self) -> str:
        if self.kind is SchemeKind.LOAD_DEPENDENT:
            return f"po2-g(g={self.g},eps={self.eps:g})"
        if self.kind is SchemeKind.LOAD_INDEPENDENT:
            return f"po2-eps(eps={self.eps:g})"
        return self.kind.value

    def stability_bound(self) -> float:
        """Supremum of arrival rates per server for which the system is stable."""
        if self.kind is SchemeKind.LOAD_INDEPENDENT and self.eps > 0.5:
            return 1.0 / (2.0 * self.eps)
        return 1.0

    def is_stable(self, lam: float) -> bool:
        return 0.0 < lam < self.stability_bound()

    def lipschitz_constant(self, lam: float) -> float:
        """l1 Lipschitz constant of the mean-field drift."""
        if self.kind is SchemeKind.LOAD_DEPENDENT:
            return lam * (16.0 * self.eps + 4.0) + 2.0
        if self.kind is SchemeKind.RANDOM:
            return 2.0 * lam + 2.0
        return 4.0 * lam + 2.0

    def queue_bound(self, lam: float) -> float:
        """Uniform upper bound on the steady-state mean queue length per server."""
        if not self.is_stable(lam):
            return math.inf
        if self.kind is SchemeKind.LOAD_DEPENDENT:
            return (1.0 + self.g * (self.eps > 0.5)) * lam / (1.0 - lam)
        return lam / (1.0 - max(1.0, 2.0 * self.effective_eps) * lam)


def join_probability(scheme: Scheme, q_i: int, q_j: int, i_precedes_j: bool) -> float:
    """Probability that a job sampling servers ``i`` and ``j`` joins ``i``."""
    if q_i < 0 or q_j < 0:
        raise ValueError("queue lengths must be nonnegative")
    kind = scheme.kind
    if kind is SchemeKind.RANDOM:
        return 0.5
    if q_i == q_j:
        return 1.0 if i_precedes_j else 0.0
    eps = scheme.effective_eps
    if kind is SchemeKind.LOAD_DEPENDENT and abs(q_i - q_j) > scheme.g:
        eps = 0.0
    return 1.0 - eps if q_i < q_j else eps


def join_probability_matrix(scheme: Scheme, q: NDArray[np.int64]) -> NDArray[np.float64]:
    """``P[i, j] = join_probability(q[i], q[j], i < j)``; the diagonal is zero."""
    q = np.asarray(q, dtype=np.int64)
    n = q.size
    if scheme.kind is SchemeKind.RANDOM:
        p = np.full((n, n), 0.5)
    else:
        diff = q[:, None] - q[None, :]
        shorter = diff < 0
        eps = scheme.effective_eps
        p = np.where(shorter, 1.0 - eps, eps)
        if scheme.kind is SchemeKind.LOAD_DEPENDENT:
            # no error outside the window: the shorter queue wins surely
            outside = np.abs(diff) > scheme.g
            p[outside] = shorter[outside]
        tie = diff == 0
        p[tie] = 0.0
        p += np.triu(tie, 1)
    np.fill_diagonal(p, 0.0)
    return p


@dataclass(frozen=True)
class TailMeasure:
    """Nonincreasing sequence in [0, 1], truncated after ``B`` entries."""

    values: NDArray[np.float64]
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise ValueError("a tail measure needs at least one entry")
        if not np.all(np.isfinite(v)):
            raise ValueError("tail measure entries must be finite")
        if v[0] > 1.0 or v[-1] < 0.0 or np.any(np.diff(v) > 0.0):
            raise ValueError("tail measure must satisfy 1 >= x1 >= x2 >= ... >= 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def B(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.B

    def __getitem__(self, k: int) -> float:
        """1-based access with the boundary convention applied."""
        if k <= 0:
            return 1.0
        if k > self.B:
            return 0.0
        return float(self.values[k - 1])

    def l1(self) -> float:
        return float(self.values.sum())

    def padded(self, B: int) -> NDArray[np.float64]:
        out = np.zeros(B)
        m = min(B, self.B)
        out[:m] = self.values[:m]
        return out

    def with_truncation(self, B: int) -> TailMeasure:
        dropped = B < self.B and bool(np.any(self.values[B:] > 0.0))
        return TailMeasure(self.padded(B), truncated=self.truncated or dropped)

    @classmethod
    def empty(cls, B: int) -> TailMeasure:
        return cls(np.zeros(B))


@dataclass(frozen=True)
class QueueState:
    queues: NDArray[np.int64]

    def __post_init__(self) -> None:
        q = np.array(self.queues, dtype=np.int64).reshape(-1)
        if q.size < 2:
            raise ValueError("need at least two servers")
        if np.any(q < 0):
            raise ValueError("queue lengths must be nonnegative")
        q.setflags(write=False)
        object.__setattr__(self, "queues", q)

    @property
    def n(self) -> int:
        return int(self.queues.size)

    @property
    def total(self) -> int:
        return int(self.queues.sum())

    @property
    def busy(self) -> int:
        return int(np.count_nonzero(self.queues))


def _as_array(s: TailMeasure | NDArray[np.float64]) -> NDArray[np.float64]:
    return s.values if isinstance(s, TailMeasure) else np.asarray(s, dtype=np.float64)


def arrival_fractions(scheme: Scheme, s: TailMeasure | NDArray[np.float64]) -> NDArray[np.float64]:
    """Vector of ``p_{i-1}(s)`` for ``i = 1..B+1`` (product form).

    Entry ``i-1`` is the probability that an arrival joins a server holding
    exactly ``i-1`` jobs.  Entries beyond ``B+1`` vanish because
    ``s_{i-1} - s_i = 0`` there.
    """
    x = _as_array(s)
    B = x.size
    kind = scheme.kind
    if kind is SchemeKind.LOAD_DEPENDENT:
        g = scheme.g
        eps = scheme.eps
        # ext[m] holds s_{m-(g+1)} for m = 0..B+2g+2
        ext = np.concatenate([np.ones(g + 2), x, np.zeros(g + 1)])
        i = np.arange(1, B + 2)
        off = g + 1
        prev = ext[i - 1 + off]
        cur = ext[i + off]
        ahead = ext[i + g + off]
        behind = ext[i - 1 - g + off]
        return (prev - cur) * (2.0 * eps * (ahead + behind) + (1.0 - 2.0 * eps) * (cur + prev))
    ext = np.concatenate([[1.0], x, [0.0]])
    prev = ext[:-1]
    cur = ext[1:]
    if kind is SchemeKind.RANDOM:
        return prev - cur
    eps = scheme.effective_eps
    return (1.0 - eps) * (prev**2 - cur**2) + eps * ((1.0 - cur) ** 2 - (1.0 - prev) ** 2)


def arrival_fractions_quadratic(scheme: Scheme, s: TailMeasure | NDArray[np.float64]) -> NDArray[np.float64]:
    """Sum-of-squares rewrite of the load-dependent ``p_{i-1}(s)``, ``i = 1..B+1``."""
    if scheme.kind is not SchemeKind.LOAD_DEPENDENT:
        raise ValueError("the quadratic rewrite applies to the load-dependent scheme")
    x = _as_array(s)
    B = x.size
    g = scheme.g
    ext = np.concatenate([np.ones(g + 2), x, np.zeros(g + 1)])
    off = g + 1
    i = np.arange(1, B + 2)
    prev = ext[i - 1 + off]
    cur = ext[i + off]
    ahead = ext[i + g + off]
    behind = ext[i - 1 - g + off]
    return (
        scheme.eps
        * ((cur - ahead) ** 2 + (behind - cur) ** 2 - (behind - prev) ** 2 - (prev - ahead) ** 2)
        + prev**2
        - cur**2
    )


def arrival_fraction(scheme: Scheme, s: TailMeasure, i: int) -> float:
    """Probability that an arrival joins a server with exactly ``i-1`` jobs."""
    if i <= 0:
        raise ValueError(f"level index must be positive, got {i}")
    x = _as_array(s)
    if i > x.size + 1:
        return 0.0
    return float(arrival_fractions(scheme, x)[i - 1])


def empirical_tail(q: QueueState | NDArray[np.int64], B: int) -> TailMeasure:
    """Fraction of servers with at least ``k`` jobs, ``k = 1..B``."""
    if B < 1:
        raise ValueError("truncation B must be positive")
    queues = q.queues if isinstance(q, QueueState) else np.asarray(q, dtype=np.int64)
    n = queues.size
    truncated = bool(queues.max(initial=0) > B)
    if truncated:
        warnings.warn(
            f"queue length {queues.max()} exceeds truncation B={B}; tail mass is lost",
            RuntimeWarning,
            stacklevel=2,
        )
    counts = np.bincount(np.minimum(queues, B), minlength=B + 1)
    at_least = counts[::-1].cumsum()[::-1]
    return TailMeasure(at_least[1:] / n, truncated=truncated)
