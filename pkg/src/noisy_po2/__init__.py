"""Power-of-two load balancing with noisy load comparisons."""
from .fixedpoint import (
    FixedPoint,
    Method,
    fixed_point,
    fixed_point_eps,
    fixed_point_g,
    heavy_traffic_ratio,
    mean_response_time,
    z_star,
)
from .lyapunov import (
    Stability,
    classify_stability,
    drift_bound_V,
    exact_drift_V,
    exact_drift_V2,
    lemma_bound_check,
)
from .meanfield import Trajectory, drift, integrate, lipschitz_check
from .model import (
    QueueState,
    Scheme,
    SchemeKind,
    TailMeasure,
    TruncationError,
    UnstableError,
    arrival_fraction,
    empirical_tail,
    join_probability,
)
from .simulator import SimConfig, SimResult, run, sweep

__all__ = [
    "FixedPoint", "Method", "QueueState", "Scheme", "SchemeKind", "SimConfig", "SimResult",
    "Stability", "TailMeasure", "Trajectory", "TruncationError", "UnstableError",
    "arrival_fraction", "classify_stability", "drift", "drift_bound_V", "empirical_tail",
    "exact_drift_V", "exact_drift_V2", "fixed_point", "fixed_point_eps", "fixed_point_g",
    "heavy_traffic_ratio", "integrate", "join_probability", "lemma_bound_check",
    "lipschitz_check", "mean_response_time", "run", "sweep", "z_star",
]
