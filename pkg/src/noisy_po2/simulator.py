"""Exact continuous-time simulation of n FCFS servers under a dispatch scheme.

Events come from two aggregate exponential clocks: arrivals at rate ``n*lam``
and departures at rate equal to the number of busy servers.  An arrival
samples an unordered pair of distinct servers uniformly and is routed with
:func:`noisy_po2.model.join_probability`; a departure leaves a uniformly
chosen busy server.

Replication ``r`` of a run seeded with ``seed`` draws from
``Generator(PCG64(SeedSequence(seed).spawn(R)[r]))``, so results depend only
on ``(config, scheme)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np
from numpy.typing import NDArray

from .model import Scheme, SchemeKind, TailMeasure

_KIND_CODE = {
    SchemeKind.RANDOM: 0,
    SchemeKind.EXACT_PO2: 1,
    SchemeKind.LOAD_INDEPENDENT: 2,
    SchemeKind.LOAD_DEPENDENT: 3,
}

THREADS_ENV = "NOISY_PO2_THREADS"


@dataclass(frozen=True)
class SimConfig:
    n: int
    lam: float
    horizon: float
    warmup: float = 0.0
    seed: int = 0
    replications: int = 1
    tail_B: int = 20
    n_samples: int = 1000
    n_batches: int = 20
    queue_cap: int = 2_000_000

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("need n >= 2 servers to sample a pair")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0 <= self.warmup < self.horizon:
            raise ValueError("need 0 <= warmup < horizon")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.tail_B < 1:
            raise ValueError("tail_B must be >= 1")
        if self.n_samples < 2 or self.n_batches < 2:
            raise ValueError("need at least two trajectory samples and two batches")
        if self.queue_cap < 1:
            raise ValueError("queue_cap must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@numba.njit(cache=True)
def _add_area(t0, t1, value, warmup, batch_len, acc):
    if t0 < warmup:
        t0 = warmup
    nb = acc.size
    while t1 > t0:
        b = int((t0 - warmup) / batch_len)
        if b >= nb - 1:
            b = nb - 1
            end = t1
        else:
            end = min(t1, warmup + (b + 1) * batch_len)
            if end <= t0:
                end = t1
        acc[b] += value * (end - t0)
        t0 = end


@numba.njit(cache=True)
def _touch_level(k, t, warmup, count, last, area):
    if t > warmup:
        start = last[k] if last[k] > warmup else warmup
        area[k] += count[k] * (t - start)
    last[k] = t


@numba.njit(cache=True, nogil=True)
def _simulate(rng, n, lam, horizon, warmup, kind, g, eps, tail_B, n_samples, n_batches, queue_cap):
    q = np.zeros(n, np.int64)
    busy_list = np.empty(n, np.int64)
    busy_pos = np.full(n, -1, np.int64)
    nbusy = 0

    # per-server FIFO of job arrival times as linked lists over a slot pool
    arrive = np.empty(queue_cap, np.float64)
    nxt = np.full(queue_cap, -1, np.int64)
    free = np.arange(queue_cap - 1, -1, -1).astype(np.int64)
    nfree = queue_cap
    head = np.full(n, -1, np.int64)
    tail = np.full(n, -1, np.int64)

    count = np.zeros(tail_B + 1, np.float64)
    last = np.zeros(tail_B + 1, np.float64)
    level_area = np.zeros(tail_B + 1, np.float64)

    batch_len = (horizon - warmup) / n_batches
    q_area = np.zeros(n_batches)
    busy_area = np.zeros(n_batches)
    resp_sum = np.zeros(n_batches)
    resp_cnt = np.zeros(n_batches)

    sample_t = np.empty(n_samples)
    for s in range(n_samples):
        sample_t[s] = warmup + (s + 1) * (horizon - warmup) / n_samples
    sample_v = np.zeros(n_samples)
    si = 0

    arrival_rate = n * lam
    total = 0
    t = 0.0
    events = 0
    capped = False
    while True:
        rate = arrival_rate + nbusy
        t_next = t + rng.standard_exponential() / rate
        t_stop = t_next if t_next < horizon else horizon
        while si < n_samples and sample_t[si] < t_stop:
            sample_v[si] = total
            si += 1
        if t_stop > warmup:
            _add_area(t, t_stop, float(total), warmup, batch_len, q_area)
            _add_area(t, t_stop, float(nbusy), warmup, batch_len, busy_area)
        if t_next >= horizon:
            t = horizon
            break
        t = t_next
        events += 1
        if rng.random() * rate < arrival_rate:
            i = rng.integers(0, n)
            j = rng.integers(0, n - 1)
            if j >= i:
                j += 1
            a = min(i, j)
            b = max(i, j)
            qa = q[a]
            qb = q[b]
            if kind == 0:
                p = 0.5
            elif qa == qb:
                p = 1.0
            else:
                e = eps
                if kind == 3 and abs(qa - qb) > g:
                    e = 0.0
                p = 1.0 - e if qa < qb else e
            k = a if rng.random() < p else b
            if nfree == 0:
                capped = True
                break
            nfree -= 1
            slot = free[nfree]
            arrive[slot] = t
            nxt[slot] = -1
            if tail[k] == -1:
                head[k] = slot
            else:
                nxt[tail[k]] = slot
            tail[k] = slot
            q[k] += 1
            if q[k] <= tail_B:
                _touch_level(q[k], t, warmup, count, last, level_area)
                count[q[k]] += 1.0
            if q[k] == 1:
                busy_pos[k] = nbusy
                busy_list[nbusy] = k
                nbusy += 1
            total += 1
        else:
            k = busy_list[rng.integers(0, nbusy)]
            slot = head[k]
            t_in = arrive[slot]
            head[k] = nxt[slot]
            if head[k] == -1:
                tail[k] = -1
            free[nfree] = slot
            nfree += 1
            if t_in >= warmup:
                bb = int((t - warmup) / batch_len)
                if bb >= n_batches:
                    bb = n_batches - 1
                resp_sum[bb] += t - t_in
                resp_cnt[bb] += 1.0
            if q[k] <= tail_B:
                _touch_level(q[k], t, warmup, count, last, level_area)
                count[q[k]] -= 1.0
            q[k] -= 1
            if q[k] == 0:
                pos = busy_pos[k]
                other = busy_list[nbusy - 1]
                busy_list[pos] = other
                busy_pos[other] = pos
                busy_pos[k] = -1
                nbusy -= 1
            total -= 1
    for k in range(1, tail_B + 1):
        _touch_level(k, t, warmup, count, last, level_area)
    while si < n_samples:
        sample_v[si] = total
        si += 1
    return (t, events, capped, q, q_area, busy_area, resp_sum, resp_cnt,
            level_area[1:], sample_t, sample_v)


@dataclass
class ReplicationResult:
    seed_index: int
    t_end: float
    events: int
    capped: bool
    mean_queue: float
    mean_queue_se: float
    busy_frac: float
    busy_frac_se: float
    resp_little: float
    resp_tagged: float
    resp_tagged_se: float
    n_tagged: int
    tail: NDArray[np.float64]
    slope: float
    unstable: bool
    sample_times: NDArray[np.float64] = field(repr=False)
    sample_totals: NDArray[np.float64] = field(repr=False)
    final_queues: NDArray[np.int64] = field(repr=False)


def _batch_se(values: NDArray[np.float64]) -> float:
    values = values[np.isfinite(values)]
    if values.size < 2:
        return math.nan
    return float(values.std(ddof=1) / math.sqrt(values.size))


def instability_slope(times: NDArray[np.float64], totals: NDArray[np.float64]) -> float:
    """Least-squares slope of the total queue against time."""
    if times.size < 2 or np.ptp(times) == 0:
        return 0.0
    return float(np.polyfit(times, totals, 1)[0])


def looks_unstable(times: NDArray[np.float64], totals: NDArray[np.float64], n: int, lam: float) -> bool:
    """Heuristic detector: sustained growth of the total queue.

    Requires a slope above ``0.001 * n * lam`` jobs per unit time and a final
    tenth whose mean exceeds the first tenth's by at least ``n`` jobs.
    """
    slope = instability_slope(times, totals)
    m = max(1, totals.size // 10)
    gain = totals[-m:].mean() - totals[:m].mean()
    return slope > 1e-3 * n * lam and gain > n


def _replication(config: SimConfig, scheme: Scheme, index: int, seq: np.random.SeedSequence) -> ReplicationResult:
    rng = np.random.Generator(np.random.PCG64(seq))
    eps = scheme.effective_eps if scheme.kind is not SchemeKind.RANDOM else 0.0
    (t_end, events, capped, q, q_area, busy_area, resp_sum, resp_cnt,
     level_area, sample_t, sample_v) = _simulate(
        rng, config.n, config.lam, float(config.horizon), float(config.warmup),
        _KIND_CODE[scheme.kind], scheme.g, eps, config.tail_B,
        config.n_samples, config.n_batches, config.queue_cap,
    )
    n = config.n
    window = t_end - config.warmup
    if window <= 0:
        nan = math.nan
        return ReplicationResult(index, t_end, events, capped, nan, nan, nan, nan, nan, nan, nan, 0,
                                 np.full(config.tail_B, nan), nan, True, sample_t, sample_v, q)
    batch_len = (config.horizon - config.warmup) / config.n_batches
    full = np.arange(config.n_batches) < math.floor(window / batch_len + 1e-9)
    mean_queue = q_area.sum() / (n * window)
    busy_frac = busy_area.sum() / (n * window)
    n_tagged = int(resp_cnt.sum())
    resp_tagged = resp_sum.sum() / n_tagged if n_tagged else math.nan
    with np.errstate(invalid="ignore", divide="ignore"):
        resp_batches = resp_sum / resp_cnt
    keep = sample_t <= t_end
    times, totals = sample_t[keep], sample_v[keep]
    slope = instability_slope(times, totals)
    unstable = capped or looks_unstable(times, totals, n, config.lam)
    return ReplicationResult(
        seed_index=index,
        t_end=float(t_end),
        events=int(events),
        capped=bool(capped),
        mean_queue=float(mean_queue),
        mean_queue_se=_batch_se(q_area[full] / (n * batch_len)),
        busy_frac=float(busy_frac),
        busy_frac_se=_batch_se(busy_area[full] / (n * batch_len)),
        resp_little=float(mean_queue / config.lam),
        resp_tagged=float(resp_tagged),
        resp_tagged_se=_batch_se(resp_batches[full]),
        n_tagged=n_tagged,
        tail=np.minimum.accumulate(level_area / (n * window)),
        slope=slope,
        unstable=bool(unstable),
        sample_times=times,
        sample_totals=totals,
        final_queues=q,
    )


def _workers(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, requested)
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class SimResult:
    config: SimConfig
    scheme: Scheme
    mean_queue: float
    mean_queue_se: float
    resp_little: float
    resp_little_se: float
    resp_tagged: float
    resp_tagged_se: float
    busy_frac: float
    busy_frac_se: float
    tail: TailMeasure
    slope: float
    unstable: bool
    replications: list[ReplicationResult] = field(repr=False)

    @property
    def mean_response_time(self) -> float:
        return self.resp_little

    @property
    def trajectory(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """(time, total queue) samples of the first replication."""
        r = self.replications[0]
        return r.sample_times, r.sample_totals

    def row(self) -> dict[str, object]:
        d = {
            "scheme": self.scheme.name,
            "g": self.scheme.g,
            "eps": self.scheme.eps,
            "n": self.config.n,
            "lambda": self.config.lam,
            "seed": self.config.seed,
            "mean_queue": self.mean_queue,
            "resp_little": self.resp_little,
            "resp_tagged": self.resp_tagged,
            "busy_frac": self.busy_frac,
            "slope": self.slope,
        }
        for k, v in enumerate(self.tail.values, start=1):
            d[f"x{k}"] = float(v)
        return d

    def record(self) -> dict[str, object]:
        """JSON-ready record with standard errors and per-replication values."""
        d = self.row()
        d.update(
            replications=self.config.replications,
            horizon=self.config.horizon,
            warmup=self.config.warmup,
            mean_queue_se=self.mean_queue_se,
            resp_little_se=self.resp_little_se,
            resp_tagged_se=self.resp_tagged_se,
            busy_frac_se=self.busy_frac_se,
            unstable=self.unstable,
            per_replication=[
                {
                    "index": r.seed_index,
                    "mean_queue": r.mean_queue,
                    "resp_tagged": r.resp_tagged,
                    "busy_frac": r.busy_frac,
                    "slope": r.slope,
                    "unstable": r.unstable,
                    "capped": r.capped,
                    "events": r.events,
                }
                for r in self.replications
            ],
        )
        return d


def _aggregate(values: Sequence[float], fallback_se: float) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size >= 2:
        return mean, float(arr.std(ddof=1) / math.sqrt(arr.size))
    return mean, float(fallback_se)


def run(config: SimConfig, scheme: Scheme, workers: int | None = None) -> SimResult:
    """Simulate ``config.replications`` independent runs and aggregate them.

    Standard errors are across replications when there are at least two,
    otherwise batch means within the single run.
    """
    seqs = np.random.SeedSequence(config.seed).spawn(config.replications)
    jobs = list(enumerate(seqs))
    nworkers = min(_workers(workers), len(jobs))
    if nworkers > 1:
        with ThreadPoolExecutor(nworkers) as pool:
            reps = list(pool.map(lambda it: _replication(config, scheme, *it), jobs))
    else:
        reps = [_replication(config, scheme, i, s) for i, s in jobs]

    first = reps[0]
    mq, mq_se = _aggregate([r.mean_queue for r in reps], first.mean_queue_se)
    rt, rt_se = _aggregate([r.resp_tagged for r in reps], first.resp_tagged_se)
    bf, bf_se = _aggregate([r.busy_frac for r in reps], first.busy_frac_se)
    tail = np.minimum.accumulate(np.clip(np.mean([r.tail for r in reps], axis=0), 0.0, 1.0))
    return SimResult(
        config=config,
        scheme=scheme,
        mean_queue=mq,
        mean_queue_se=mq_se,
        resp_little=mq / config.lam,
        resp_little_se=mq_se / config.lam,
        resp_tagged=rt,
        resp_tagged_se=rt_se,
        busy_frac=bf,
        busy_frac_se=bf_se,
        tail=TailMeasure(tail),
        slope=float(np.mean([r.slope for r in reps])),
        unstable=sum(r.unstable for r in reps) * 2 > len(reps),
        replications=reps,
    )


@dataclass
class SweepRow:
    config: SimConfig
    scheme: Scheme
    result: SimResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None


def sweep(cells: Iterable[tuple[SimConfig, Scheme]], workers: int | None = None) -> list[SweepRow]:
    """Run every ``(config, scheme)`` cell; failures become error rows.

    Row order follows the input order regardless of completion order.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("sweep needs at least one cell")

    def one(cell: tuple[SimConfig, Scheme]) -> SweepRow:
        config, scheme = cell
        try:
            return SweepRow(config, scheme, run(config, scheme, workers=1))
        except Exception as exc:  # noqa: BLE001 - reported per row
            return SweepRow(config, scheme, None, f"{type(exc).__name__}: {exc}")

    nworkers = min(_workers(workers), len(cells))
    if nworkers > 1:
        with ThreadPoolExecutor(nworkers) as pool:
            return list(pool.map(one, cells))
    return [one(c) for c in cells]


CSV_COLUMNS = ["scheme", "g", "eps", "n", "lambda", "seed", "mean_queue", "resp_little",
               "resp_tagged", "busy_frac", "slope"]


def _fmt(v: object, decimals: int) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{decimals}f}"
    return str(v)


def rows_to_csv(rows: Sequence[SweepRow], tail_B: int | None = None, decimals: int = 6) -> str:
    """CSV text with a fixed column set; failed cells carry an ``error`` entry."""
    if tail_B is None:
        tail_B = max(r.config.tail_B for r in rows)
    header = CSV_COLUMNS + [f"x{k}" for k in range(1, tail_B + 1)] + ["error"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        if r.result is not None:
            d = r.result.row()
            line = [_fmt(d.get(c, math.nan if c.startswith("x") else ""), decimals) for c in header[:-1]]
            line.append("")
        else:
            base = {"scheme": r.scheme.name, "g": r.scheme.g, "eps": r.scheme.eps, "n": r.config.n,
                    "lambda": r.config.lam, "seed": r.config.seed}
            line = [_fmt(base.get(c, math.nan), decimals) for c in header[:-1]]
            line.append(r.error or "")
        w.writerow(line)
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def rows_to_json(rows: Sequence[SweepRow]) -> str:
    out = []
    for r in rows:
        if r.result is not None:
            out.append(r.result.record())
        else:
            out.append({"scheme": r.scheme.name, "g": r.scheme.g, "eps": r.scheme.eps,
                        "n": r.config.n, "lambda": r.config.lam, "seed": r.config.seed,
                        "error": r.error})
    return json.dumps(_jsonable(out), indent=2, sort_keys=True) + "\n"


def config_dict(config: SimConfig) -> dict[str, object]:
    return asdict(config)
