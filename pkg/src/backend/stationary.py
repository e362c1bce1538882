"""
Krylov-Bogolyubov averages and the quantitative bound checks built on them.

The X(0)-marginal of Q_T = (1/T) int_{-T}^0 P_s ds is the law of X(U) with
U ~ Uniform[0, T] under the zero-past solution, so Q_T is sampled by reading
each trajectory at one uniformly drawn node.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg, stats

from src.errors import EstimationError, ParameterError
from src.backend.integrator import EnsembleOptions, run_ensemble, step_count
from src.backend.noise import LANE_PROJECTION, LANE_UNIFORM_TIME, keyed_generator
from src.models.drift import DriftSpec
from src.models.history import CSV_FLOAT_FORMAT, PastHistory
from src.models.trajectory import Trajectory, TrajectoryEnsemble

logger = logging.getLogger("StationaryKB")

# --- Constants ---
DEFAULT_PROJECTIONS = 64
DEFAULT_DELTA = 0.1
DEFAULT_DELTA0 = 0.05
DEFAULT_K_WINDOW = 4.0
# Fraction of windows allowed above K n^{1/2 + delta0} before the growth check fails.
GROWTH_VIOLATION_TOLERANCE = 0.01
# Number of standard errors used by every statistical verdict.
SIGMA_MULTIPLIER = 3.0
BOOTSTRAP_RESAMPLES = 200
MIN_INCREMENT_ENSEMBLE = 100


class SamplingMode:
    UNIFORM_TIME = "uniform_time"
    TERMINAL = "terminal"
    ALL = (UNIFORM_TIME, TERMINAL)


class Verdict:
    PASS = "PASS"
    FAIL = "FAIL"


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Equal-weight sample cloud; ``memory`` holds the paired memory coordinate when captured."""
    samples: np.ndarray
    provenance: Dict[str, object] = field(default_factory=dict)
    memory: Optional[np.ndarray] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] == 0:
            raise EstimationError("Empirical measure needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise EstimationError("Empirical measure samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def dimension(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]

    def second_moment(self) -> float:
        return float(np.mean(np.sum(self.samples ** 2, axis=1)))

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def joint_covariance(self) -> np.ndarray:
        """Covariance of (X, M) stacked column-wise; needs captured memory."""
        if self.memory is None:
            raise EstimationError("Measure was sampled without the memory coordinate")
        return np.cov(np.hstack([self.samples, self.memory]), rowvar=False)

    def to_csv_text(self) -> str:
        d = self.dimension
        header = [f"x_{i + 1}" for i in range(d)]
        rows = self.samples
        if self.memory is not None:
            header += [f"m_{i + 1}" for i in range(self.memory.shape[1])]
            rows = np.hstack([self.samples, self.memory])
        lines = [",".join(header)]
        lines += [",".join(format(float(v), CSV_FLOAT_FORMAT) for v in row) for row in rows]
        return "\r\n".join(lines) + "\r\n"

    def sidecar(self) -> dict:
        return {"n": len(self), "dimension": self.dimension, "second_moment": self.second_moment(),
                "provenance": dict(self.provenance)}


@dataclass
class BoundCheckReport:
    bound_name: str
    theoretical: float
    empirical: float
    tolerance: float
    verdict: str
    constants: Dict[str, object] = field(default_factory=dict)
    details: Dict[str, object] = field(default_factory=dict)
    curve: Optional[List[Sequence[float]]] = None
    curve_header: Optional[List[str]] = None

    @property
    def passed(self) -> bool:
        return self.verdict == Verdict.PASS

    def to_dict(self):
        data = {"bound_name": self.bound_name, "theoretical": self.theoretical, "empirical": self.empirical,
                "tolerance": self.tolerance, "verdict": self.verdict, "constants": dict(self.constants),
                "details": dict(self.details)}
        return data


def _verdict(ok: bool) -> str:
    return Verdict.PASS if ok else Verdict.FAIL


def zero_past(spec: DriftSpec, dt: float) -> PastHistory:
    return PastHistory.zeros(spec.dimension, dt, 0.0, spec.kernels)


def uniform_nodes(n: int, T: float, dt: float, seed: int) -> np.ndarray:
    """Node round(U_i T / dt) per trajectory, U_i from the trajectory's own key."""
    n_steps = step_count(T, dt)
    u = np.array([keyed_generator(seed, i, LANE_UNIFORM_TIME).random() for i in range(n)])
    return np.minimum(np.rint(u * n_steps).astype(np.int64), n_steps)


def kb_average(spec: DriftSpec, n: int, T: float, dt: float, seed: int,
               mode: str = SamplingMode.UNIFORM_TIME, capture_memory: bool = False,
               threads: Optional[int] = 1) -> EmpiricalMeasure:
    """Empirical X(0)-marginal of Q_T (uniform_time) or law of X(T) (terminal) from zero past."""
    if n < 1:
        raise ParameterError(f"Ensemble size must be >= 1, got {n}")
    if mode not in SamplingMode.ALL:
        raise ParameterError(f"Unknown sampling mode {mode!r}")
    n_steps = step_count(T, dt)
    if mode == SamplingMode.UNIFORM_TIME:
        nodes = uniform_nodes(n, T, dt, seed)[:, None]
    else:
        nodes = np.full((n, 1), n_steps, dtype=np.int64)
    options = EnsembleOptions(capture_nodes=nodes, capture_memory=capture_memory)
    run = run_ensemble(spec, zero_past(spec, dt), n, T, seed, options, threads=threads)
    memory = run.captured_memory[:, 0, :] if capture_memory else None
    provenance = {"n": n, "T": T, "dt": dt, "seed": seed, "mode": mode, "drift": spec.to_dict()}
    measure = EmpiricalMeasure(run.captured[:, 0, :], provenance, memory)
    logger.info(f"Q_T sample ({mode}) n={n} T={T}: second moment {measure.second_moment():.6g}")
    return measure


def projection_directions(dimension: int, projections: int, seed: int) -> np.ndarray:
    gen = keyed_generator(seed, 0, LANE_PROJECTION)
    v = gen.standard_normal((projections, dimension))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def w1_distance(m1: EmpiricalMeasure, m2: EmpiricalMeasure, projections: int = DEFAULT_PROJECTIONS,
                seed: int = 0) -> float:
    """Exact W1 for d = 1, sliced W1 over seeded unit projections otherwise."""
    if m1.dimension != m2.dimension:
        raise EstimationError(f"Dimension mismatch: {m1.dimension} vs {m2.dimension}")
    if m1.dimension == 1:
        return float(stats.wasserstein_distance(m1.samples[:, 0], m2.samples[:, 0]))
    if projections < 1:
        raise ParameterError("projections must be >= 1")
    dirs = projection_directions(m1.dimension, projections, seed)
    p1 = m1.samples @ dirs.T
    p2 = m2.samples @ dirs.T
    return float(np.mean([stats.wasserstein_distance(p1[:, j], p2[:, j]) for j in range(projections)]))


def bootstrap_second_moment_se(m: EmpiricalMeasure, seed: int = 0,
                               resamples: int = BOOTSTRAP_RESAMPLES) -> float:
    sq = np.sum(m.samples ** 2, axis=1)
    gen = keyed_generator(seed, 1, LANE_PROJECTION)
    idx = gen.integers(0, sq.size, size=(resamples, sq.size))
    return float(np.std(sq[idx].mean(axis=1), ddof=1))


def moment_limit(C1: float, C2: float, dimension: int = 1) -> float:
    """M* = (2 C1 + d) / (2 C2), the fixed point of y' = (2 C1 + d) - 2 C2 y."""
    if not C2 > 0.0:
        raise ParameterError(f"C2 must be > 0, got {C2}")
    return (2.0 * C1 + dimension) / (2.0 * C2)


def moment_bound_check(m: EmpiricalMeasure, C1: float, C2: float, tolerance: Optional[float] = None,
                       seed: int = 0) -> BoundCheckReport:
    """Second moment of m against M* plus tolerance (default 3 bootstrap SE)."""
    bound = moment_limit(C1, C2, m.dimension)
    empirical = m.second_moment()
    se = bootstrap_second_moment_se(m, seed)
    tol = SIGMA_MULTIPLIER * se if tolerance is None else float(tolerance)
    report = BoundCheckReport("moment_bound", bound, empirical, tol, _verdict(empirical <= bound + tol),
                              {"C1": C1, "C2": C2, "M": bound, "d": m.dimension}, {"bootstrap_se": se, "n": len(m)})
    _log_report(report)
    return report


def increment_bound(z: float, lag: float, C3: float, M: float, dimension: int = 1) -> Dict[str, float]:
    """Chebyshev-type bound on P(|X(t2) - X(t1)| > z), split into noise and drift parts."""
    if not z > 0.0:
        raise ParameterError(f"z must be > 0, got {z}")
    brownian = 16.0 * dimension * (dimension + 2) * z ** -4 * lag ** 2
    drift = 4.0 * C3 ** 2 * z ** -2 * M * lag ** 2
    return {"brownian": brownian, "drift": drift, "total": brownian + drift}


def increment_tail_check_samples(start: np.ndarray, end: np.ndarray, z: float, lag: float, C3: float,
                                 M: float, min_ensemble: int = MIN_INCREMENT_ENSEMBLE) -> BoundCheckReport:
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if start.ndim == 1:
        start, end = start[:, None], end[:, None]
    n = start.shape[0]
    if n < min_ensemble:
        raise EstimationError(f"Increment check needs at least {min_ensemble} samples, got {n}")
    parts = increment_bound(z, lag, C3, M, start.shape[1])
    bound = parts["total"]
    freq = float(np.mean(np.linalg.norm(end - start, axis=1) > z))
    p = min(bound, 1.0)
    tol = SIGMA_MULTIPLIER * math.sqrt(p * (1.0 - p) / n)
    ok = bound >= 1.0 or freq <= bound + tol
    report = BoundCheckReport("increment_tail", bound, freq, tol, _verdict(ok),
                              {"z": z, "dt": lag, "C3": C3, "M": M, "d": start.shape[1]},
                              {"brownian_part": parts["brownian"], "drift_part": parts["drift"], "n": n,
                               "automatic_pass": bound >= 1.0})
    _log_report(report)
    return report


def increment_tail_check(ensemble: TrajectoryEnsemble, z: float, t1: float, t2: float, C3: float,
                         M: float, min_ensemble: int = MIN_INCREMENT_ENSEMBLE) -> BoundCheckReport:
    """Empirical P(|X(t2) - X(t1)| > z) against the increment bound (binomial 3 sigma)."""
    if not t1 < t2:
        raise ParameterError(f"Need t1 < t2, got {t1}, {t2}")
    return increment_tail_check_samples(ensemble.at_time(t1), ensemble.at_time(t2), z, t2 - t1, C3, M,
                                        min_ensemble)


def increment_samples(spec: DriftSpec, n: int, T: float, dt: float, seed: int, lags: Sequence[float],
                      threads: Optional[int] = 1) -> Dict[float, tuple]:
    """Pairs (X(U), X(U + lag)) with U uniform on [0, T - max lag], one run for all lags."""
    lag_steps = [step_count(lag, dt) for lag in lags]
    span = step_count(T, dt) - max(lag_steps)
    if span < 0:
        raise ParameterError("Horizon shorter than the largest increment lag")
    u = np.array([keyed_generator(seed, i, LANE_UNIFORM_TIME).random() for i in range(n)])
    base = np.rint(u * span).astype(np.int64)
    nodes = np.column_stack([base] + [base + k for k in lag_steps])
    run = run_ensemble(spec, zero_past(spec, dt), n, T, seed, EnsembleOptions(capture_nodes=nodes),
                       threads=threads)
    return {lag: (run.captured[:, 0, :], run.captured[:, j + 1, :]) for j, lag in enumerate(lags)}


def growth_diagnostic(traj: Trajectory, delta: float = DEFAULT_DELTA, delta0: float = DEFAULT_DELTA0,
                      K_window: float = DEFAULT_K_WINDOW,
                      violation_tolerance: float = GROWTH_VIOLATION_TOLERANCE) -> BoundCheckReport:
    """Window maxima m_n = max_{[n-1, n]} |X| against K n^{1/2 + delta0}.

    Forward unit windows of a stationary run stand in for the past windows
    [-n-1, -n]; the trend is the fitted slope of m_n / n^{1/2 + delta}.
    """
    if not 0.0 < delta0 < delta:
        raise ParameterError(f"Need 0 < delta0 < delta, got delta0={delta0}, delta={delta}")
    per_unit = step_count(1.0, traj.grid_step)
    n_windows = traj.n_steps // per_unit
    if n_windows < 2:
        raise EstimationError(f"Horizon {traj.horizon} covers fewer than 2 unit windows")
    norms = np.linalg.norm(traj.x_values, axis=1)
    n = np.arange(1, n_windows + 1, dtype=float)
    maxima = np.array([norms[(j - 1) * per_unit:j * per_unit + 1].max() for j in range(1, n_windows + 1)])
    threshold = K_window * n ** (0.5 + delta0)
    ratio = maxima / n ** (0.5 + delta)
    violations = maxima > threshold
    fraction = float(np.mean(violations))
    trend = float(np.polyfit(n, ratio, 1)[0])
    curve = [[float(a), float(b), float(c), float(r)] for a, b, c, r in zip(n, maxima, threshold, ratio)]
    report = BoundCheckReport(
        "growth_windows", violation_tolerance, fraction, 0.0, _verdict(fraction <= violation_tolerance),
        {"delta": delta, "delta0": delta0, "K": K_window},
        {"windows": n_windows, "violations": int(violations.sum()), "trend": trend,
         "first_violation": int(n[violations][0]) if violations.any() else None},
        curve, ["n", "m_n", "K*n^(1/2+delta0)", "m_n/n^(1/2+delta)"])
    _log_report(report)
    return report


@dataclass
class EnergySample:
    """Per-path |X_N|^2, dt sum |X_k|^2 and dt^2 sum |a_k|^2 of a zero-past run."""
    terminal: np.ndarray
    energy: np.ndarray
    drift_energy: np.ndarray
    T: float


def energy_sample(spec: DriftSpec, n: int, T: float, dt: float, seed: int,
                  threads: Optional[int] = 1) -> EnergySample:
    run = run_ensemble(spec, zero_past(spec, dt), n, T, seed, EnsembleOptions(accumulate_energy=True),
                       threads=threads)
    return EnergySample(run.terminal, run.energy, run.drift_energy, T)


def energy_inequality_check(sample: EnergySample, C1: float, C2: float) -> BoundCheckReport:
    """E|X_N|^2 + 2 C2 dt sum E|X_k|^2 - dt^2 sum E|a_k|^2 <= (2 C1 + d) T, with 3 SE slack.

    This is the Euler form of E|X(T)|^2 + 2 C2 int_0^T E|X|^2 <= (2 C1 + d) T:
    the drift term is what the scheme adds per step, so OU sits exactly on the
    bound in expectation.
    """
    d = sample.terminal.shape[1]
    rhs = (2.0 * C1 + d) * sample.T
    lhs = np.sum(sample.terminal ** 2, axis=1) + 2.0 * C2 * sample.energy - sample.drift_energy
    q = lhs - rhs
    se = float(np.std(q, ddof=1) / math.sqrt(q.size)) if q.size > 1 else math.inf
    empirical = float(np.mean(lhs))
    tol = SIGMA_MULTIPLIER * se
    report = BoundCheckReport("energy_inequality", rhs, empirical, tol, _verdict(empirical <= rhs + tol),
                              {"C1": C1, "C2": C2, "T": sample.T, "d": d},
                              {"mean_terminal_square": float(np.mean(np.sum(sample.terminal ** 2, axis=1))),
                               "mean_energy": float(np.mean(sample.energy)),
                               "mean_drift_correction": float(np.mean(sample.drift_energy)), "n": int(q.size)})
    _log_report(report)
    return report


def kb_convergence(spec: DriftSpec, horizons: Sequence[float], n: int, dt: float, seed: int,
                   projections: int = DEFAULT_PROJECTIONS, threads: Optional[int] = 1) -> List[dict]:
    """W1(Q_T, Q_2T) per horizon with a same-T independent-seed noise floor."""
    rows = []
    for T in horizons:
        q_t = kb_average(spec, n, T, dt, seed, threads=threads)
        q_2t = kb_average(spec, n, 2 * T, dt, seed + 1, threads=threads)
        replica = kb_average(spec, n, T, dt, seed + 2, threads=threads)
        w = w1_distance(q_t, q_2t, projections, seed)
        floor = w1_distance(q_t, replica, projections, seed)
        rows.append({"T": T, "w1": w, "noise_floor": floor, "excess": w - floor})
        logger.info(f"W1(Q_{T}, Q_{2 * T}) = {w:.5g} (noise floor {floor:.5g})")
    return rows


def lift_covariance(b: float, kappa: float, rate: float) -> np.ndarray:
    """Stationary covariance of (X, M) for dX = (-bX + kappa M)dt + dW, dM = rate (X - M) dt."""
    A = np.array([[-b, kappa], [rate, -rate]], dtype=float)
    if np.max(np.linalg.eigvals(A).real) >= 0.0:
        raise ParameterError(f"Markovian lift is not stable for b={b}, kappa={kappa}, lambda={rate}")
    BBt = np.diag([1.0, 0.0])
    return linalg.solve_continuous_lyapunov(A, -BBt)


def _log_report(report: BoundCheckReport):
    message = (f"{report.bound_name}: empirical {report.empirical:.6g} vs theoretical {report.theoretical:.6g} "
               f"(tol {report.tolerance:.3g}) -> {report.verdict}")
    if report.passed:
        logger.info(message)
    else:
        logger.warning(message)
