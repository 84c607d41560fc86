"""Mean-field fixed points, the dominating sequence z*, and response times."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .meanfield import default_truncation, drift, pseudo_transient
from .model import Scheme, SchemeKind, TailMeasure, TruncationError, UnstableError

FIXED_POINT_TOL = 1e-12
RELAXATION_TOL = 1e-8


class Method(str, Enum):
    RECURSION = "recursion"
    ODE_RELAXATION = "ode_relaxation"


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FixedPoint:
    tail: TailMeasure
    residual_l1: float
    method: Method
    lam: float
    scheme: Scheme
    tol: float

    @property
    def x(self) -> NDArray[np.float64]:
        return self.tail.values

    def mean_queue(self) -> float:
        return self.tail.l1()


def _check_stable(scheme: Scheme, lam: float) -> None:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not scheme.is_stable(lam):
        bound = scheme.stability_bound()
        if bound < 1.0:
            raise UnstableError(
                f"lambda={lam} is outside the stability region lambda < 1/(2*eps) = {bound:.6g}"
            )
        raise UnstableError(f"lambda={lam} is outside the stability region lambda < 1")


def _recursion(step, lam: float, tol: float, max_len: int) -> NDArray[np.float64]:
    xs = [lam]
    while len(xs) < max_len:
        nxt = step(xs[-1])
        if nxt < tol:
            break
        xs.append(nxt)
    else:
        raise TruncationError(f"tail still above tol={tol} after {max_len} levels")
    return np.array(xs)


def fixed_point_eps(lam: float, eps: float, tol: float = FIXED_POINT_TOL, max_len: int = 1_000_000) -> FixedPoint:
    """Fixed point of the load-independent error model via its recursion.

    ``x_1 = lam`` and ``x_i = lam * ((1 - 2 eps) x_{i-1}^2 + 2 eps x_{i-1})``;
    levels are kept while the next value stays at or above ``tol``.
    """
    scheme = Scheme.load_independent(eps) if eps > 0 else Scheme.exact_po2()
    _check_stable(scheme, lam)
    a = 1.0 - 2.0 * eps
    b = 2.0 * eps
    x = _recursion(lambda v: lam * (a * v * v + b * v), lam, tol, max_len)
    residual = float(np.abs(drift(scheme, x, lam)).sum())
    return FixedPoint(TailMeasure(x), residual, Method.RECURSION, lam, scheme, tol)


def _fixed_point_random(lam: float, tol: float) -> FixedPoint:
    scheme = Scheme.random()
    _check_stable(scheme, lam)
    x = _recursion(lambda v: lam * v, lam, tol, 10_000_000)
    residual = float(np.abs(drift(scheme, x, lam)).sum())
    return FixedPoint(TailMeasure(x), residual, Method.RECURSION, lam, scheme, tol)


def z_star(lam: float, g: int, tol: float = 1e-12, max_len: int = 100_000) -> TailMeasure:
    """Dominating sequence ``z_i = lam * z_{i-1-g}^2`` with ``z_i = 1`` for ``i <= 0``.

    Levels below ``tol`` are dropped.
    """
    if not 0 < lam < 1:
        raise ValueError("z* requires 0 < lambda < 1")
    if g < 0:
        raise ValueError("g must be nonnegative")
    z = [1.0] * (g + 1)
    while len(z) - (g + 1) < max_len:
        nxt = lam * z[-(g + 1)] ** 2
        if nxt < tol:
            return TailMeasure(np.array(z[g + 1:]))
        z.append(nxt)
    raise TruncationError("z* did not fall below tol")


def z_star_norm(lam: float, g: int, tol: float = 1e-16) -> float:
    """``(g + 1) * sum_i lam^(2^i - 1)``, summed until terms drop below ``tol``."""
    total = 0.0
    i = 1
    while True:
        term = lam ** (2.0**i - 1.0)
        if term < tol:
            return (g + 1) * total
        total += term
        i += 1


def coupled_equation_residuals(x: NDArray[np.float64], lam: float, g: int, eps: float) -> NDArray[np.float64]:
    """Residuals of the non-recursive fixed-point equations, one per level.

    Entry 0 is ``x_1 - lam``; entry ``k-1`` (``k >= 2``) is ``x_k`` minus
    ``lam * (2 eps (x_{k-1} x_{k-1-g} - sum_{i=k}^{k+g-1} x_i (x_{i-1-g} - x_{i-g}))
    + (1 - 2 eps) x_{k-1}^2)``.
    """
    B = x.size
    ext = np.concatenate([np.ones(g + 1), x, np.zeros(g + 1)])

    # ext[k + g] holds x_k (1-based), since ext[g] = x_0 = 1
    def s(k):
        return ext[np.asarray(k) + g]

    k = np.arange(2, B + 1)
    # inner sum over i = k..k+g-1 of x_i (x_{i-1-g} - x_{i-g})
    terms = np.zeros(B + g + 1)
    i_all = np.arange(1, B + g + 1)
    terms[1:] = s(i_all) * (s(i_all - 1 - g) - s(i_all - g))
    csum = np.concatenate([[0.0], np.cumsum(terms[1:])])  # csum[m] = sum_{i=1}^{m}
    inner = csum[np.minimum(k + g - 1, B + g)] - csum[k - 1]
    rhs = lam * (2.0 * eps * (s(k - 1) * s(k - 1 - g) - inner) + (1.0 - 2.0 * eps) * s(k - 1) ** 2)
    out = np.empty(B)
    out[0] = x[0] - lam
    out[1:] = x[1:] - rhs
    return out


def fixed_point_g(
    lam: float,
    g: int,
    eps: float,
    tol: float = RELAXATION_TOL,
    *,
    B: int | None = None,
    max_iter: int = 500,
    start: NDArray[np.float64] | None = None,
) -> FixedPoint:
    """Fixed point of the load-dependent error model by ODE relaxation.

    Follows the mean-field ODE from the empty state (or ``start``) by implicit
    continuation until the l1 drift falls below ``tol / 10``, then checks the
    coupled fixed-point equations to ``10 * tol`` and domination by z*.
    """
    scheme = Scheme.load_dependent(g, eps)
    _check_stable(scheme, lam)
    if B is None:
        B = default_truncation(scheme, lam)
    x0 = np.zeros(B) if start is None else TailMeasure(start).padded(B)
    # go past tol so the reported residual has headroom
    x, residual, _ = pseudo_transient(scheme, x0, lam, 0.1 * tol, max_iter)
    if residual >= tol:
        raise ConvergenceError(f"continuation stalled at ||G||_1 = {residual:.3e} (tol {tol:.1e})")
    if x[-1] > tol:
        raise TruncationError(f"x_B = {x[-1]:.3e} at truncation B={B}; raise B")
    eq = np.abs(coupled_equation_residuals(x, lam, g, eps)).max()
    if eq > 10.0 * tol:
        raise ConvergenceError(f"fixed-point equations violated by {eq:.3e}")
    z = z_star(lam, g, tol=min(tol, 1e-12)).padded(B)
    excess = float((x - z).max())
    if excess > 10.0 * tol:
        raise ConvergenceError(f"fixed point exceeds z* by {excess:.3e}")
    return FixedPoint(TailMeasure(x), residual, Method.ODE_RELAXATION, lam, scheme, tol)


def fixed_point(scheme: Scheme, lam: float, tol: float | None = None) -> FixedPoint:
    """Fixed point for any scheme, by recursion where one exists."""
    if scheme.kind is SchemeKind.LOAD_DEPENDENT:
        return fixed_point_g(lam, scheme.g, scheme.eps, RELAXATION_TOL if tol is None else tol)
    tol = FIXED_POINT_TOL if tol is None else tol
    if scheme.kind is SchemeKind.RANDOM:
        return _fixed_point_random(lam, tol)
    return fixed_point_eps(lam, scheme.effective_eps, tol)


def mean_response_time(fp: FixedPoint) -> float:
    """Mean response time ``||x*||_1 / lam`` in the large-system limit."""
    return fp.tail.l1() / fp.lam


@dataclass(frozen=True)
class RatioRow:
    lam: float
    T2: float
    T1: float
    ratio: float
    reference: float  # 1/log(2-2eps) limit, or (g+1)/log 2 upper bound


def heavy_traffic_reference(scheme: Scheme) -> float:
    if scheme.kind is SchemeKind.LOAD_DEPENDENT:
        return (scheme.g + 1) / math.log(2.0)
    if scheme.kind is SchemeKind.RANDOM:
        return math.inf
    eps = scheme.effective_eps
    if eps >= 0.5:
        return math.inf
    return 1.0 / math.log(2.0 - 2.0 * eps)


def heavy_traffic_ratio(scheme: Scheme, lambda_grid: Sequence[float], tol: float = 1e-14) -> list[RatioRow]:
    """``T2(lam) / log T1(lam)`` with ``T1 = 1/(1 - lam)`` on a grid of loads."""
    rows = []
    ref = heavy_traffic_reference(scheme)
    for lam in lambda_grid:
        _check_stable(scheme, lam)
        if scheme.kind is SchemeKind.LOAD_DEPENDENT:
            fp = fixed_point_g(lam, scheme.g, scheme.eps, RELAXATION_TOL)
        else:
            fp = fixed_point(scheme, lam, tol)
        T2 = mean_response_time(fp)
        T1 = 1.0 / (1.0 - lam)
        rows.append(RatioRow(lam, T2, T1, T2 / math.log(T1), ref))
    return rows
