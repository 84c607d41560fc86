"""Mean-field drift of the tail measure and its fixed-step RK4 integration."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .model import Scheme, SchemeKind, TailMeasure, TruncationError, arrival_fractions

MAX_TRUNCATION = 512
TRUNCATION_FLOOR = 1e-12


def drift(scheme: Scheme, s: TailMeasure | NDArray[np.float64], lam: float) -> NDArray[np.float64]:
    """``lam * p_{i-1}(s) - (s_i - s_{i+1})`` for ``i = 1..B`` with ``s_{B+1} = 0``."""
    x = s.values if isinstance(s, TailMeasure) else np.asarray(s, dtype=np.float64)
    p = arrival_fractions(scheme, x)[: x.size]
    departures = x - np.append(x[1:], 0.0)
    return lam * p - departures


def default_truncation(scheme: Scheme, lam: float, cap: int = MAX_TRUNCATION) -> int:
    """Smallest level at which the dominating tail drops below 1e-12, capped."""
    if scheme.kind is SchemeKind.LOAD_DEPENDENT:
        x = [1.0] * (scheme.g + 1)
        k = 0
        while k < cap:
            k += 1
            x.append(lam * x[-(scheme.g + 1)] ** 2)
            if x[-1] < TRUNCATION_FLOOR:
                return k
        return cap
    if scheme.kind is SchemeKind.RANDOM:
        if lam >= 1.0:
            return cap
        return min(cap, math.ceil(math.log(TRUNCATION_FLOOR) / math.log(lam)))
    eps = scheme.effective_eps
    x, k = lam, 1
    while x >= TRUNCATION_FLOOR and k < cap:
        x = lam * ((1.0 - 2.0 * eps) * x * x + 2.0 * eps * x)
        k += 1
    return k


@dataclass(frozen=True)
class MeanFieldState:
    tail: TailMeasure
    time: float


@dataclass
class Trajectory:
    scheme: Scheme
    lam: float
    times: NDArray[np.float64]
    states: NDArray[np.float64]  # shape (len(times), B)
    step: float
    B: int
    final_drift_l1: float
    clamped: int = 0

    def __len__(self) -> int:
        return self.times.size

    def __iter__(self) -> Iterator[MeanFieldState]:
        for t, row in zip(self.times, self.states):
            yield MeanFieldState(TailMeasure(row), float(t))

    @property
    def final(self) -> TailMeasure:
        return TailMeasure(self.states[-1])

    def to_csv(self, path: str | Path, decimals: int = 12) -> None:
        with open(path, "w", newline="") as fh:
            write_trajectory_csv(self, fh, decimals)


def write_trajectory_csv(traj: Trajectory, fh, decimals: int = 12) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", *[f"x{k}" for k in range(1, traj.B + 1)]])
    for t, row in zip(traj.times, traj.states):
        w.writerow([f"{t:.6f}", *[f"{v:.{decimals}f}" for v in row]])


def _rk4_step(scheme: Scheme, x: NDArray[np.float64], lam: float, h: float) -> NDArray[np.float64]:
    k1 = drift(scheme, x, lam)
    k2 = drift(scheme, x + 0.5 * h * k1, lam)
    k3 = drift(scheme, x + 0.5 * h * k2, lam)
    k4 = drift(scheme, x + h * k3, lam)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_size(scheme: Scheme, lam: float) -> float:
    return min(0.1, 1.0 / scheme.lipschitz_constant(lam))


def _project(x: NDArray[np.float64], tol: float) -> tuple[NDArray[np.float64], bool]:
    """Clamp roundoff-sized excursions back into the tail-measure cone.

    Raises when an excursion exceeds ``tol``.
    """
    low = x.min()
    high = x.max()
    rises = np.diff(x)
    worst_rise = rises.max() if rises.size else 0.0
    if low < -tol or high > 1.0 + tol or worst_rise > tol:
        raise TruncationError(
            f"state left the tail-measure cone (min={low:.3e}, max={high:.3e}, "
            f"rise={worst_rise:.3e}); truncation too small or step too large"
        )
    if low < 0.0 or high > 1.0 or worst_rise > 0.0:
        return np.minimum.accumulate(np.clip(x, 0.0, 1.0)), True
    return x, False


def integrate(
    scheme: Scheme,
    x0: TailMeasure,
    lam: float,
    t_end: float,
    rtol: float = 1e-9,
    *,
    B: int | None = None,
    output_times: Sequence[float] | None = None,
    n_out: int = 101,
) -> Trajectory:
    """Integrate the mean-field ODE from ``x0`` over ``[0, t_end]`` with RK4.

    The step is the largest ``h <= min(0.1, 1/L)`` dividing ``t_end`` into an
    integer number of steps, ``L`` being the drift's Lipschitz constant.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if B is None:
        B = max(x0.B, default_truncation(scheme, lam))
    x = x0.padded(B)
    if x0.B > B and np.any(x0.values[B:] > rtol):
        raise TruncationError(f"initial state has mass beyond truncation B={B}")

    h_max = step_size(scheme, lam)
    n_steps = max(1, math.ceil(t_end / h_max - 1e-9))
    h = t_end / n_steps
    if output_times is None:
        output_times = np.linspace(0.0, t_end, n_out)
    out_t = np.asarray(sorted(set(float(t) for t in output_times)))
    if out_t[0] < 0 or out_t[-1] > t_end + 1e-12:
        raise ValueError("output times must lie in [0, t_end]")
    # Output times are snapped to the step grid.
    out_steps = np.rint(out_t / h).astype(np.int64)
    out_steps, first = np.unique(out_steps, return_index=True)
    out_t = out_steps * h

    tol = 10.0 * rtol
    states = np.empty((out_steps.size, B))
    clamped = 0
    j = 0
    for step in range(n_steps + 1):
        if step > 0:
            x = _rk4_step(scheme, x, lam, h)
            x, hit = _project(x, tol)
            clamped += hit
            if x[-1] > rtol:
                raise TruncationError(
                    f"x_B = {x[-1]:.3e} exceeds rtol at t = {step * h:.4f}; increase B (now {B})"
                )
        while j < out_steps.size and out_steps[j] == step:
            states[j] = x
            j += 1
    final = float(np.abs(drift(scheme, x, lam)).sum())
    return Trajectory(scheme, lam, out_t, states, h, B, final, clamped)


def drift_jacobian(scheme: Scheme, x: NDArray[np.float64], lam: float, h: float = 0.5) -> NDArray[np.float64]:
    """Jacobian of :func:`drift` at ``x``.

    The drift is a quadratic polynomial in ``x``, so central differences are
    exact for any ``h`` up to roundoff.
    """
    B = x.size
    J = np.empty((B, B))
    e = np.zeros(B)
    for j in range(B):
        e[j] = h
        J[:, j] = (drift(scheme, x + e, lam) - drift(scheme, x - e, lam)) / (2.0 * h)
        e[j] = 0.0
    return J


def pseudo_transient(
    scheme: Scheme,
    x0: NDArray[np.float64],
    lam: float,
    tol: float,
    max_iter: int = 500,
) -> tuple[NDArray[np.float64], float, int]:
    """Implicit-Euler continuation of the ODE from ``x0`` to a rest point.

    Each step solves ``(I/dt - J) dx = G(x)`` and the step grows by at least
    1.5x or ``||G_old|| / ||G_new||``, so the iteration follows the flow early
    on and turns into Newton's method near the fixed point.  A step that
    doubles the residual is rejected and ``dt`` cut by 4.
    Returns ``(x, residual, iterations)``.
    """
    x = np.array(x0, dtype=np.float64)
    B = x.size
    eye = np.eye(B)
    dt = step_size(scheme, lam)
    G = drift(scheme, x, lam)
    res = float(np.abs(G).sum())
    for it in range(max_iter):
        if res < tol:
            return x, res, it
        J = drift_jacobian(scheme, x, lam)
        trial = x + np.linalg.solve(eye / dt - J, G)
        trial = np.minimum.accumulate(np.clip(trial, 0.0, 1.0))
        G_new = drift(scheme, trial, lam)
        res_new = float(np.abs(G_new).sum())
        if not res_new < 2.0 * res:
            dt *= 0.25  # overshoot: retreat toward explicit flow
            continue
        # SER growth, with a geometric floor so slow transients do not stall
        dt = min(dt * max(res / max(res_new, 1e-300), 1.5), 1e15)
        x, G, res = trial, G_new, res_new
    return x, res, max_iter


@dataclass
class LipschitzReport:
    scheme: Scheme
    lam: float
    constant: float
    trials: int
    max_ratio: float
    holds: bool
    violation: tuple[NDArray[np.float64], NDArray[np.float64]] | None = field(default=None, repr=False)


def random_tail(rng: np.random.Generator, B: int) -> NDArray[np.float64]:
    """Random nonincreasing sequence in [0, 1] of length ``B`` with random support."""
    support = int(rng.integers(1, B + 1))
    top = rng.uniform(0.0, 1.0)
    steps = rng.dirichlet(np.ones(support + 1))[:support]
    vals = np.zeros(B)
    vals[:support] = top * (1.0 - np.cumsum(steps) + steps[0])
    return np.minimum.accumulate(np.clip(vals, 0.0, 1.0))


def lipschitz_check(scheme: Scheme, lam: float, trials: int, seed: int = 0, B: int = 40) -> LipschitzReport:
    """Probe ``||drift(x) - drift(y)||_1 <= L ||x - y||_1`` on random pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    L = scheme.lipschitz_constant(lam)
    worst = 0.0
    violation = None
    for t in range(trials):
        x = random_tail(rng, B)
        # mix in nearby pairs, where ratios are largest
        y = random_tail(rng, B) if t % 2 else np.minimum.accumulate(
            np.clip(x + rng.normal(0.0, 1e-3, B), 0.0, 1.0)
        )
        dist = np.abs(x - y).sum()
        if dist == 0.0:
            continue
        ratio = np.abs(drift(scheme, x, lam) - drift(scheme, y, lam)).sum() / dist
        if ratio > worst:
            worst = float(ratio)
            if ratio > L * (1.0 + 1e-12) and violation is None:
                violation = (x, y)
    return LipschitzReport(scheme, lam, L, trials, worst, violation is None, violation)
