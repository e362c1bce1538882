"""
Change of past: drift discrepancy along a spliced path, Novikov integral,
Radon-Nikodym density, and the shared-noise coupling experiment.

For a trajectory X started from x_past, the spliced path yX follows y_past
on s < 0 and X on s >= 0. Both histories are advanced with the same future
samples, so a(pi_t X) and a(pi_t yX) are available in O(1) per node.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.integrate import quad, trapezoid

from src.errors import HistoryError, ParameterError
from src.backend.conditions import LipschitzEstimate, PathSampler, estimate_lipschitz
from src.backend.integrator import EnsembleOptions, run_ensemble, simulate
from src.models.drift import DriftSpec, evaluate
from src.models.history import PastHistory, quadrature_kernel, tail_contribution
from src.models.trajectory import Trajectory

logger = logging.getLogger("Girsanov")

# --- Constants ---
# Accumulator check tolerance is this times dt^2 per unit of integrated length.
ACCUMULATOR_TOL_FACTOR = 10.0
DEFAULT_CHECK_EVERY = 100
# Default F: clamp of the windowed time-average of one coordinate.
DEFAULT_FUNCTIONAL_WINDOW = 1.0
DEFAULT_FUNCTIONAL_BOUND = 10.0
# Sampler radius used when the realized path never leaves 0.
MIN_ENDPOINT_BOUND = 1e-12


def bound_constant(K: float, k_prime: float, rate: float, rate_prime: float) -> float:
    """L = K K' / (rate - rate') from |da(t)| <= K K' e^{-rate t} int_0^inf e^{-(rate - rate') u} du."""
    if not rate_prime < rate:
        raise ParameterError(f"lambda' = {rate_prime} must be below lambda = {rate}")
    return K * k_prime / (rate - rate_prime)


def bound_constant_quadrature(K: float, k_prime: float, rate: float, rate_prime: float) -> float:
    """Same constant by numerical quadrature of the chain at t = 0."""
    if not rate_prime < rate:
        raise ParameterError(f"lambda' = {rate_prime} must be below lambda = {rate}")
    value, _ = quad(lambda s: math.exp(rate * s) * k_prime * math.exp(rate_prime * abs(s)), -math.inf, 0.0)
    return K * value


@dataclass
class DiscrepancyProfile:
    """|a(pi_t X) - a(pi_t yX)| per node with the bound L e^{-rate t}.

    ``signed`` holds a(pi_t yX) - a(pi_t X) as vectors.
    """
    times: np.ndarray
    values: np.ndarray
    signed: np.ndarray
    K: float
    k_prime: float
    rate: float
    rate_prime: float
    L: float

    def bound(self) -> np.ndarray:
        return self.L * np.exp(-self.rate * self.times)

    def max_bound_ratio(self) -> float:
        """max_k |da(t_k)| / (L e^{-rate t_k}); 0 for a vanishing profile."""
        b = self.bound()
        if not np.any(self.values > 0.0):
            return 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(np.max(np.where(self.values > 0.0, self.values / b, 0.0)))

    def with_constant(self, K: float) -> "DiscrepancyProfile":
        """Same discrepancy measured against the bound built from another K."""
        return replace(self, K=float(K), L=bound_constant(K, self.k_prime, self.rate, self.rate_prime))

    def dat_rows(self) -> List[List[float]]:
        return [[float(t), float(v), float(b)] for t, v, b in zip(self.times, self.values, self.bound())]

    def to_dict(self):
        return {"K": self.K, "k_prime": self.k_prime, "rate": self.rate, "rate_prime": self.rate_prime,
                "L": self.L, "max_value": float(np.max(self.values)), "max_bound_ratio": self.max_bound_ratio(),
                "nodes": int(self.values.size)}


def realized_endpoint_bound(traj: Trajectory) -> float:
    return float(np.max(np.linalg.norm(traj.x_values, axis=1)))


def estimate_realized_lipschitz(traj: Trajectory, spec: DriftSpec, sampler: PathSampler, seed: int,
                                rate: Optional[float] = None, threads: int = 1) -> LipschitzEstimate:
    """K_hat restricted to endpoints |x(0)| <= sup_t |X(t)| of ``traj``."""
    rate = rate if rate is not None else (spec.family.memory_rate or 1.0)
    bound = max(realized_endpoint_bound(traj), MIN_ENDPOINT_BOUND)
    restricted = PathSampler(**{**sampler.to_dict(), "endpoint_bound": bound})
    estimate = estimate_lipschitz(spec, rate, restricted, seed, threads=threads)
    logger.info(f"K_hat = {estimate.K_hat:.6g} on |x(0)| <= {bound:.6g} ({estimate.n_pairs} pairs)")
    return estimate


def _check_pasts(x_past: PastHistory, y_past: PastHistory):
    if not math.isclose(x_past.grid_step, y_past.grid_step, rel_tol=1e-12):
        raise HistoryError("Pasts live on different grids")
    if not np.array_equal(x_past.current, y_past.current):
        raise HistoryError(f"Pasts must share the endpoint: {x_past.current} vs {y_past.current}")


def drift_discrepancy(traj: Trajectory, x_past: PastHistory, y_past: PastHistory, spec: DriftSpec,
                      k_prime: float, rate_prime: float, K: Optional[float] = None,
                      rate: Optional[float] = None) -> DiscrepancyProfile:
    """Profile of the drift change caused by replacing x_past with y_past behind X.

    ``K`` defaults to the family's analytic Lipschitz constant on the realized
    endpoint range sup |X(t)|; ``rate`` to its memory rate (1 for memoryless drifts).
    """
    _check_pasts(x_past, y_past)
    if not np.array_equal(traj.x_values[0], x_past.current):
        raise HistoryError("Trajectory does not start from x_past's endpoint")
    rate = rate if rate is not None else (spec.family.memory_rate or 1.0)
    if K is None:
        K = spec.family.lipschitz_bound(realized_endpoint_bound(traj), rate)
        if K is None:
            raise ParameterError(f"Drift {spec.family.name} has no Lipschitz constant at rate {rate}")
    L = bound_constant(K, k_prime, rate, rate_prime)

    dt = traj.grid_step
    hx, hy = x_past, y_past
    signed = np.empty_like(traj.x_values)
    for k in range(traj.n_steps + 1):
        signed[k] = evaluate(spec, hy) - evaluate(spec, hx)
        if k < traj.n_steps:
            v = traj.x_values[k + 1]
            hx = hx.push_sample(dt, v)
            hy = hy.push_sample(dt, v)
    values = np.linalg.norm(signed, axis=1)
    profile = DiscrepancyProfile(traj.times, values, signed, K, k_prime, rate, rate_prime, L)
    logger.info(f"Discrepancy: max {values.max():.6g}, L={L:.6g}, max ratio to bound {profile.max_bound_ratio():.4f}")
    return profile


def verify_dual_accumulators(traj: Trajectory, x_past: PastHistory, y_past: PastHistory, spec: DriftSpec,
                             every: int = DEFAULT_CHECK_EVERY) -> Dict[str, float]:
    """Max gap between O(1) accumulators and brute-force quadrature of the spliced records."""
    dt = traj.grid_step
    worst = 0.0
    tolerance = math.inf
    states = {"x": x_past, "y": y_past}
    for k in range(traj.n_steps + 1):
        if k % every == 0 or k == traj.n_steps:
            for name, past in (("x", x_past), ("y", y_past)):
                record = np.concatenate([past.window, traj.x_values[1:k + 1]], axis=0)
                elapsed = (past.steps + k) * dt
                for key in spec.kernels:
                    brute = quadrature_kernel(record, dt, key.rate, key.transform) + tail_contribution(
                        past.tail_model, key.rate, key.transform, past.tail_span, past.dimension, elapsed)
                    fast = states[name].kernel_integral(key.rate, key.transform)
                    worst = max(worst, float(np.max(np.abs(fast - brute))))
            length = (len(x_past) - 1) * dt + k * dt
            tolerance = min(tolerance, ACCUMULATOR_TOL_FACTOR * dt ** 2 * max(length, 1.0))
        if k < traj.n_steps:
            v = traj.x_values[k + 1]
            states = {name: h.push_sample(dt, v) for name, h in states.items()}
    return {"max_deviation": worst, "tolerance": tolerance, "passed": worst <= tolerance}


@dataclass
class GirsanovReport:
    horizon: float
    truncated_integral: float
    tail_bound: float
    novikov_integral: float
    novikov_bound: float
    finite: bool
    log_rn_density: Optional[float] = None
    rn_density: Optional[float] = None
    profile: Optional[DiscrepancyProfile] = None
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def within_bound(self) -> bool:
        return self.truncated_integral <= self.novikov_bound + 1e-6

    def to_dict(self):
        data = {"horizon": self.horizon, "truncated_integral": self.truncated_integral,
                "tail_bound": self.tail_bound, "novikov_integral": self.novikov_integral,
                "novikov_bound": self.novikov_bound, "finite": self.finite,
                "within_bound": self.within_bound,
                "log_rn_density": self.log_rn_density, "rn_density": self.rn_density}
        if self.profile is not None:
            data["profile"] = self.profile.to_dict()
        data.update(self.extra)
        return data


def novikov(profile: DiscrepancyProfile, horizon: Optional[float] = None) -> GirsanovReport:
    """1/2 int_0^T |da|^2 dt by trapezoid plus the closed-form tail L^2 e^{-2 rate T} / (4 rate)."""
    T = float(profile.times[-1]) if horizon is None else float(horizon)
    mask = profile.times <= T + 1e-12
    truncated = 0.5 * float(trapezoid(profile.values[mask] ** 2, profile.times[mask]))
    tail = profile.L ** 2 * math.exp(-2.0 * profile.rate * T) / (4.0 * profile.rate)
    total = truncated + tail
    bound = profile.L ** 2 / (4.0 * profile.rate)
    return GirsanovReport(T, truncated, tail, total, bound, math.isfinite(total), profile=profile)


def log_density(signed: np.ndarray, increments: np.ndarray, dt: float) -> float:
    """sum da_k . dW_k - 1/2 sum |da_k|^2 dt over the steps."""
    signed = np.asarray(signed, dtype=float)
    increments = np.asarray(increments, dtype=float)
    if signed.shape != increments.shape:
        raise ParameterError(f"Discrepancy has shape {signed.shape}, increments {increments.shape}")
    return float(np.sum(signed * increments) - 0.5 * np.sum(signed * signed) * dt)


def rn_density(traj: Trajectory, profile: DiscrepancyProfile,
               increments: Optional[np.ndarray] = None) -> GirsanovReport:
    """Girsanov density of the y_past law against the x_past law along ``traj``."""
    increments = traj.increments if increments is None else np.asarray(increments, dtype=float)
    if profile.signed.shape[0] != increments.shape[0] + 1:
        raise ParameterError(f"Profile has {profile.signed.shape[0]} nodes for {increments.shape[0]} increments")
    log_rn = log_density(profile.signed[:-1], increments, traj.grid_step)
    report = novikov(profile)
    report.log_rn_density = log_rn
    report.rn_density = math.exp(log_rn)
    return report


def girsanov_report(traj: Trajectory, x_past: PastHistory, y_past: PastHistory, spec: DriftSpec,
                    k_prime: float, rate_prime: float, K: Optional[float] = None) -> GirsanovReport:
    profile = drift_discrepancy(traj, x_past, y_past, spec, k_prime, rate_prime, K=K)
    report = rn_density(traj, profile)
    report.extra["bound_constant_quadrature"] = bound_constant_quadrature(profile.K, k_prime, profile.rate,
                                                                          rate_prime)
    return report


def rn_density_ensemble(spec: DriftSpec, x_past: PastHistory, y_past: PastHistory, n: int, T: float,
                        seed: int, threads: Optional[int] = 1) -> Dict[str, float]:
    """Monte Carlo mean and standard error of the density over n trajectories from x_past."""
    _check_pasts(x_past, y_past)
    run = run_ensemble(spec, x_past, n, T, seed, EnsembleOptions(shadow_past=y_past), threads=threads)
    densities = np.exp(run.log_density)
    mean = float(np.mean(densities))
    se = float(np.std(densities, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    logger.info(f"E[density] = {mean:.5f} +- {se:.5f} over {n} paths (T={T})")
    return {"mean": mean, "standard_error": se, "n": n, "T": T,
            "min_density": float(np.min(densities)), "all_finite": bool(np.all(np.isfinite(densities)))}


@dataclass(frozen=True)
class WindowFunctional:
    """F(theta_t X) = clamp(mean of X_coordinate over [t, t + window], +-bound)."""
    window: float = DEFAULT_FUNCTIONAL_WINDOW
    bound: float = DEFAULT_FUNCTIONAL_BOUND
    coordinate: int = 0

    def __post_init__(self):
        if not (self.window > 0.0 and self.bound > 0.0) or self.coordinate < 0:
            raise ParameterError("functional window and bound must be > 0, coordinate >= 0")

    def values(self, traj: Trajectory) -> np.ndarray:
        """F at every node t with t + window inside the trajectory."""
        dt = traj.grid_step
        width = int(round(self.window / dt))
        if width < 1 or width > traj.n_steps:
            raise ParameterError(f"Functional window {self.window} does not fit the trajectory")
        x = traj.x_values[:, self.coordinate]
        cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (x[1:] + x[:-1]) * dt)])
        means = (cumulative[width:] - cumulative[:-width]) / (width * dt)
        return np.clip(means, -self.bound, self.bound)

    def to_dict(self):
        return {"window": self.window, "bound": self.bound, "coordinate": self.coordinate}


def running_average(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values) / np.arange(1, values.size + 1)


@dataclass
class CouplingReport:
    times: np.ndarray
    discrepancy: np.ndarray
    average_times: np.ndarray
    average_1: np.ndarray
    average_2: np.ndarray
    functional: WindowFunctional
    trajectories: tuple

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.average_1 - self.average_2)

    def dat_rows(self) -> List[List[float]]:
        """(t, |X1 - X2|, A1, A2, gap); averages are NaN where the window runs past T."""
        rows = []
        gap = self.gap
        for j, t in enumerate(self.times):
            if j < self.average_times.size:
                rows.append([float(t), float(self.discrepancy[j]), float(self.average_1[j]),
                             float(self.average_2[j]), float(gap[j])])
            else:
                rows.append([float(t), float(self.discrepancy[j]), math.nan, math.nan, math.nan])
        return rows

    def to_dict(self):
        return {"final_average_1": float(self.average_1[-1]), "final_average_2": float(self.average_2[-1]),
                "final_gap": float(self.gap[-1]), "max_discrepancy": float(self.discrepancy.max()),
                "final_discrepancy": float(self.discrepancy[-1]), "functional": self.functional.to_dict(),
                "horizon": float(self.times[-1])}


def couple(spec: DriftSpec, past1: PastHistory, past2: PastHistory, T: float, dt: float, seed: int,
           functional: Optional[WindowFunctional] = None, trajectory_index: int = 0) -> CouplingReport:
    """Two runs from different pasts driven by the same Wiener increments."""
    if not math.isclose(past1.grid_step, past2.grid_step, rel_tol=1e-12):
        raise HistoryError("Pasts live on different grids")
    functional = functional or WindowFunctional()
    traj1 = simulate(spec, past1, T, dt, seed, trajectory_index=trajectory_index)
    traj2 = simulate(spec, past2, T, dt, seed, trajectory_index=trajectory_index)
    discrepancy = np.linalg.norm(traj1.x_values - traj2.x_values, axis=1)
    f1 = functional.values(traj1)
    f2 = functional.values(traj2)
    report = CouplingReport(traj1.times, discrepancy, traj1.times[:f1.size], running_average(f1),
                            running_average(f2), functional, (traj1, traj2))
    logger.info(f"Coupling: final gap {report.gap[-1]:.3g}, final |X1 - X2| {discrepancy[-1]:.3g}")
    return report
