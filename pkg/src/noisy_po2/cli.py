"""Command-line front end.

Exit codes: 0 success, 1 numerical failure (truncation or non-convergence),
2 invalid arguments, 3 a drift or bound check was falsified.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fixedpoint as fpmod
from . import lyapunov, meanfield, simulator
from .model import Scheme, SchemeKind, TailMeasure, TruncationError, UnstableError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FALSIFIED = 3
EXIT_NUMERICAL = 1


class UsageError(ValueError):
    pass


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` with both endpoints included (within 1e-12)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"grid must look like start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: {exc}") from None
    if step <= 0 or stop < start:
        raise UsageError(f"grid {text!r} must have step > 0 and stop >= start")
    count = int(math.floor((stop - start) / step + 1e-12)) + 1
    return [round(start + k * step, 12) for k in range(count)]


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    scheme: Scheme
    lambdas: tuple[float, ...]
    out: str | None
    fmt: str
    params: dict = field(default_factory=dict)


def _scheme_from_args(args: argparse.Namespace) -> Scheme:
    kind = SchemeKind(args.scheme)
    if kind is SchemeKind.LOAD_DEPENDENT and (args.g is None or args.eps is None):
        raise UsageError("--scheme po2-g needs --g and --eps")
    if kind is SchemeKind.LOAD_INDEPENDENT and args.eps is None:
        raise UsageError("--scheme po2-eps needs --eps")
    if kind is SchemeKind.LOAD_INDEPENDENT and args.g is not None:
        raise UsageError("--scheme po2-eps takes no --g")
    if kind in (SchemeKind.RANDOM, SchemeKind.EXACT_PO2) and (args.g is not None or args.eps is not None):
        raise UsageError(f"--scheme {kind.value} takes no --g/--eps")
    try:
        return Scheme.from_name(args.scheme, g=args.g or 0, eps=args.eps or 0.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _lambdas(args: argparse.Namespace, required: bool = True, default: float | None = None) -> tuple[float, ...]:
    if getattr(args, "lambda_grid", None):
        values = parse_grid(args.lambda_grid)
    elif args.lam is not None:
        values = [args.lam]
    elif required:
        raise UsageError("one of --lambda or --lambda-grid is required")
    else:
        values = [default]
    for v in values:
        if not v > 0:
            raise UsageError(f"lambda must be positive, got {v}")
    return tuple(values)


def _config(args: argparse.Namespace, **params) -> ExperimentConfig:
    return ExperimentConfig(
        command=args.command,
        scheme=_scheme_from_args(args),
        lambdas=params.pop("lambdas"),
        out=args.out,
        fmt=args.format,
        params=params,
    )


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj: object) -> str:
    return json.dumps(simulator._jsonable(obj), indent=2, sort_keys=True) + "\n"


def _f(v: float, decimals: int = 12) -> str:
    return "nan" if math.isnan(v) else ("inf" if math.isinf(v) else f"{v:.{decimals}f}")


# -- commands -------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args, lambdas=_lambdas(args))
    try:
        cells = [
            (
                simulator.SimConfig(
                    n=args.n, lam=lam, horizon=args.horizon, warmup=args.warmup, seed=args.seed,
                    replications=args.replications, tail_B=args.tail_b,
                ),
                cfg.scheme,
            )
            for lam in cfg.lambdas
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = simulator.sweep(cells)
    text = simulator.rows_to_json(rows) if cfg.fmt == "json" else simulator.rows_to_csv(rows, args.tail_b)
    _emit(text, cfg.out)
    # uniform queue-length bound, checked on stable cells
    falsified = []
    for r in rows:
        if r.result is None or not cfg.scheme.is_stable(r.config.lam):
            continue
        res = r.result
        bound = cfg.scheme.queue_bound(r.config.lam)
        se = res.mean_queue_se if math.isfinite(res.mean_queue_se) else 0.0
        if res.mean_queue > bound + 3.0 * se:
            falsified.append(f"lambda={r.config.lam}: mean queue {res.mean_queue:.4f} > bound {bound:.4f}")
    for msg in falsified:
        print(f"bound check failed: {msg}", file=sys.stderr)
    return EXIT_FALSIFIED if falsified else EXIT_OK


def cmd_meanfield(args: argparse.Namespace) -> int:
    cfg = _config(args, lambdas=_lambdas(args))
    if len(cfg.lambdas) != 1:
        raise UsageError("meanfield takes a single --lambda")
    lam = cfg.lambdas[0]
    scheme = cfg.scheme
    if args.t_end <= 0:
        raise UsageError("--t-end must be positive")
    B = args.tail_b or meanfield.default_truncation(scheme, lam)
    if args.from_fixed_point:
        try:
            fp = fpmod.fixed_point(scheme, lam)
        except UnstableError as exc:
            raise UsageError(str(exc)) from None
        x0 = fp.tail
        B = max(B, x0.B)
    else:
        x0 = TailMeasure.empty(B)
    traj = meanfield.integrate(scheme, x0, lam, args.t_end, args.rtol, B=B, n_out=args.n_out)
    if cfg.fmt == "json":
        text = _json_text({
            "scheme": scheme.name, "g": scheme.g, "eps": scheme.eps, "lambda": lam,
            "step": traj.step, "B": traj.B, "final_drift_l1": traj.final_drift_l1,
            "times": [round(float(t), 6) for t in traj.times],
            "states": [[round(float(v), 12) for v in row] for row in traj.states],
        })
    else:
        buf = io.StringIO()
        meanfield.write_trajectory_csv(traj, buf)
        text = buf.getvalue()
    _emit(text, cfg.out)

    problems = []
    if not args.from_fixed_point and scheme.kind is SchemeKind.LOAD_DEPENDENT and lam < 1:
        tol = 10.0 * args.rtol
        if np.any(np.diff(traj.states, axis=0) < -tol):
            problems.append("trajectory from the empty state is not nondecreasing")
        z = fpmod.z_star(lam, scheme.g).padded(traj.B)
        if np.any(traj.states > z + tol):
            problems.append("trajectory from the empty state exceeds z*")
    for p in problems:
        print(f"check failed: {p}", file=sys.stderr)
    return EXIT_FALSIFIED if problems else EXIT_OK


def cmd_fixedpoint(args: argparse.Namespace) -> int:
    cfg = _config(args, lambdas=_lambdas(args))
    records = []
    for lam in cfg.lambdas:
        try:
            fp = fpmod.fixed_point(cfg.scheme, lam, args.tol)
        except UnstableError as exc:
            raise UsageError(str(exc)) from None
        records.append(fp)
    if cfg.fmt == "json":
        text = _json_text([
            {
                "scheme": fp.scheme.name, "g": fp.scheme.g, "eps": fp.scheme.eps, "lambda": fp.lam,
                "method": fp.method.value, "residual_l1": fp.residual_l1,
                "mean_response_time": fpmod.mean_response_time(fp), "x": [float(v) for v in fp.x],
            }
            for fp in records
        ])
    else:
        rows = [
            [f"{fp.lam:.6f}", k, _f(float(v))]
            for fp in records
            for k, v in enumerate(fp.x, start=1)
        ]
        text = _csv_text(["lambda", "k", "x"], rows)
    _emit(text, cfg.out)
    return EXIT_OK


def cmd_ratio(args: argparse.Namespace) -> int:
    cfg = _config(args, lambdas=_lambdas(args))
    for lam in cfg.lambdas:
        if not cfg.scheme.is_stable(lam):
            raise UsageError(f"lambda={lam} is at or above the stability bound {cfg.scheme.stability_bound():.6g}")
    rows = fpmod.heavy_traffic_ratio(cfg.scheme, cfg.lambdas)
    if cfg.fmt == "json":
        text = _json_text([
            {"lambda": r.lam, "T2": r.T2, "T1": r.T1, "ratio": r.ratio, "reference": r.reference} for r in rows
        ])
    else:
        text = _csv_text(
            ["lambda", "T2", "T1", "ratio", "reference"],
            [[f"{r.lam:.6f}", _f(r.T2, 8), _f(r.T1, 8), _f(r.ratio, 8), _f(r.reference, 8)] for r in rows],
        )
    _emit(text, cfg.out)
    if cfg.scheme.kind is SchemeKind.LOAD_DEPENDENT:
        bad = [r for r in rows if r.ratio > r.reference]
        for r in bad:
            print(f"ratio {r.ratio:.6f} exceeds (g+1)/log 2 = {r.reference:.6f} at lambda={r.lam}", file=sys.stderr)
        if bad:
            return EXIT_FALSIFIED
    return EXIT_OK


def cmd_driftcheck(args: argparse.Namespace) -> int:
    cfg = _config(args, lambdas=_lambdas(args, required=False, default=0.9))
    scheme = cfg.scheme
    if args.qmax < 1 or args.n < 2 or args.trials < 0:
        raise UsageError("need --qmax >= 1, --n >= 2 and --trials >= 0")
    lemma = lyapunov.lemma_bound_check(scheme, args.qmax)
    rng = np.random.default_rng(args.seed)
    results = []
    ok = lemma.passed
    for lam in cfg.lambdas:
        worst_gap = -math.inf
        failures = 0
        rate_err = 0.0
        v2_min = math.inf
        for _ in range(args.trials):
            q = rng.integers(0, args.qmax + 1, size=args.n)
            rep = lyapunov.drift_report(q, scheme, lam)
            worst_gap = max(worst_gap, rep.drift_V - rep.bound_V)
            failures += not rep.bound_satisfied
            rate_err = max(rate_err, abs(lyapunov.arrival_rates(q, scheme, lam).sum() - args.n * lam))
            if rep.drift_V2 is not None:
                v2_min = min(v2_min, rep.drift_V2)
        ok = ok and failures == 0 and rate_err <= 1e-10 * max(1.0, args.n * lam)
        results.append({
            "lambda": lam,
            "stability": lyapunov.classify_stability(scheme, lam).value,
            "states_checked": args.trials,
            "drift_bound_failures": failures,
            "max_drift_minus_bound": worst_gap if args.trials else None,
            "max_rate_conservation_error": rate_err,
            "min_drift_V2": v2_min if math.isfinite(v2_min) else None,
            "V2_lower_bound": lyapunov.v2_lower_bound(scheme, lam)
            if scheme.kind is SchemeKind.LOAD_INDEPENDENT and scheme.eps > 0.5 else None,
        })
    report = {
        "scheme": scheme.name, "g": scheme.g, "eps": scheme.eps,
        "lemma": {"qmax": lemma.qmax, "pairs_checked": lemma.pairs_checked, "min_slack": lemma.min_slack,
                  "passed": lemma.passed, "violation": list(lemma.violation) if lemma.violation else None},
        "drift": results,
        "passed": ok,
    }
    if cfg.fmt == "csv":
        text = _csv_text(
            ["lambda", "stability", "lemma_passed", "lemma_min_slack", "states_checked", "drift_bound_failures",
             "max_rate_conservation_error", "passed"],
            [[f"{r['lambda']:.6f}", r["stability"], str(lemma.passed).lower(), _f(lemma.min_slack, 6),
              r["states_checked"], r["drift_bound_failures"], f"{r['max_rate_conservation_error']:.3e}",
              str(ok).lower()] for r in results],
        )
    else:
        text = _json_text(report)
    _emit(text, cfg.out)
    return EXIT_OK if ok else EXIT_FALSIFIED


# -- parser ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser, grid: bool = True) -> None:
    p.add_argument("--scheme", required=True, choices=[k.value for k in SchemeKind])
    p.add_argument("--g", type=int, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    if grid:
        p.add_argument("--lambda-grid", dest="lambda_grid", default=None, metavar="START:STOP:STEP")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisy-po2", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the n-server system")
    _common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--horizon", type=float, default=5000.0)
    p.add_argument("--warmup", type=float, default=500.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--tail-b", dest="tail_b", type=int, default=20)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("meanfield", help="integrate the mean-field ODE")
    _common(p, grid=False)
    p.add_argument("--t-end", dest="t_end", type=float, default=100.0)
    p.add_argument("--rtol", type=float, default=1e-9)
    p.add_argument("--tail-b", dest="tail_b", type=int, default=None)
    p.add_argument("--n-out", dest="n_out", type=int, default=101)
    p.add_argument("--from-fixed-point", dest="from_fixed_point", action="store_true")
    p.set_defaults(func=cmd_meanfield)

    p = sub.add_parser("fixedpoint", help="mean-field fixed point")
    _common(p)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_fixedpoint)

    p = sub.add_parser("ratio", help="heavy-traffic response-time ratio")
    _common(p)
    p.set_defaults(func=cmd_ratio)

    p = sub.add_parser("driftcheck", help="brute-force Lyapunov drift checks")
    _common(p)
    p.add_argument("--qmax", type=int, default=50)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_driftcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TruncationError, fpmod.ConvergenceError) as exc:
        print(f"{parser.prog} {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
