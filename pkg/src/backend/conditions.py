"""
Empirical estimation of the drift constants.

    Lipschitz:     |a(x) - a(y)| <= K int e^{lambda s} |x(s) - y(s)| ds   (x(0) = y(0))
    Dissipativity: (a(x), x(0)) <= C1 - C2 |x(0)|^2
    Growth:        |a(x)| <= C3 |x(0)|

Pasts are drawn by a seeded ``PathSampler``; every draw i uses its own
Philox key so estimates do not depend on worker scheduling, and every
reported witness can be re-drawn and re-evaluated.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import EstimationError, ParameterError
from src.backend.noise import LANE_SAMPLER, keyed_generator
from src.models.drift import DriftSpec, evaluate
from src.models.history import CSV_FLOAT_FORMAT, PastHistory, Transform, quadrature_kernel

logger = logging.getLogger("ConditionEstimator")

# --- Constants ---
# C2 candidates live on the grid k * C2_RESOLUTION.
C2_RESOLUTION = 1e-3
# Allowed constant C1 when no C2 > 0 fits with C1 = 0.
DEFAULT_C1_BUDGET = 1.0
# Relative slack of the C1 = 0 envelope test.
ENVELOPE_TOL = 1e-12
# Pairs per worker task.
ESTIMATOR_CHUNK = 128


class WitnessKind:
    LIPSCHITZ = "lipschitz"
    LIPSCHITZ_ZERO_DISTANCE = "lipschitz_zero_distance"
    DISSIPATIVITY = "dissipativity"
    GROWTH = "growth"
    GROWTH_ZERO_ENDPOINT = "growth_zero_endpoint"


@dataclass(frozen=True)
class PathSampler:
    """Random pasts on [-window, 0].

    A sampled past is x(s) = x0 + h(s) with
        h(s) = c (1 - e^{mu s}) + e^{lambda' s} sum_j a_j (sin(w_j s + p_j) - sin p_j),
    so h(0) = 0 and the endpoint x0 (uniform in the ball |x0| <= R, or exactly 0
    with probability ``zero_endpoint_fraction``) is decoupled from the memory.
    Pairs share the endpoint; a fraction of them differ by a one-signed bump
    amp * v |s| e^{mu s} concentrated near s = 0.
    """
    window: float = 20.0
    grid_step: float = 0.01
    n_pairs: int = 1000
    endpoint_bound: float = 1.0
    damping_rate: float = 0.5
    n_modes: int = 4
    amplitude: float = 1.0
    max_frequency: float = 2.0
    offset_scale: float = 10.0
    offset_ramp: float = 5.0
    zero_endpoint_fraction: float = 0.1
    aligned_fraction: float = 0.25

    def __post_init__(self):
        for name in ("window", "grid_step", "endpoint_bound", "damping_rate", "offset_ramp"):
            if not getattr(self, name) > 0.0:
                raise ParameterError(f"sampler.{name} must be > 0, got {getattr(self, name)}")
        if self.n_pairs < 1 or self.n_modes < 0:
            raise ParameterError("sampler.n_pairs must be >= 1 and sampler.n_modes >= 0")
        for name in ("zero_endpoint_fraction", "aligned_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"sampler.{name} must lie in [0, 1]")

    @property
    def times(self) -> np.ndarray:
        n = int(round(self.window / self.grid_step)) + 1
        return -self.grid_step * np.arange(n - 1, -1, -1, dtype=float)

    def _endpoint(self, gen: np.random.Generator, dimension: int, bound: float) -> np.ndarray:
        zero = gen.random() < self.zero_endpoint_fraction
        direction = gen.standard_normal(dimension)
        radius = bound * gen.random() ** (1.0 / dimension)
        if zero:
            return np.zeros(dimension)
        norm = np.linalg.norm(direction)
        return direction / norm * radius if norm > 0.0 else np.zeros(dimension)

    def _perturbation(self, gen: np.random.Generator, dimension: int) -> np.ndarray:
        s = self.times[:, None]
        c = gen.uniform(-self.offset_scale, self.offset_scale, dimension)
        amps = gen.normal(0.0, self.amplitude, (self.n_modes, dimension))
        omega = gen.uniform(0.0, self.max_frequency, self.n_modes)
        phase = gen.uniform(0.0, 2.0 * np.pi, (self.n_modes, dimension))
        h = c * (1.0 - np.exp(self.offset_ramp * s))
        damp = np.exp(self.damping_rate * s)
        for j in range(self.n_modes):
            h = h + damp * amps[j] * (np.sin(omega[j] * s + phase[j]) - np.sin(phase[j]))
        h[-1] = 0.0
        return h

    def draw_path(self, seed: int, index: int, dimension: int,
                  bound: Optional[float] = None) -> np.ndarray:
        """Past number ``index`` of shape (L, d)."""
        gen = keyed_generator(seed, index, LANE_SAMPLER)
        x0 = self._endpoint(gen, dimension, self.endpoint_bound if bound is None else bound)
        return x0 + self._perturbation(gen, dimension)

    def draw_pair(self, seed: int, index: int, dimension: int,
                  bound: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Pair number ``index`` with equal endpoints."""
        gen = keyed_generator(seed, index, LANE_SAMPLER, block=1)
        x0 = self._endpoint(gen, dimension, self.endpoint_bound if bound is None else bound)
        x = x0 + self._perturbation(gen, dimension)
        if gen.random() < self.aligned_fraction:
            v = gen.standard_normal(dimension)
            v /= max(np.linalg.norm(v), 1e-300)
            s = self.times[:, None]
            y = x + self.amplitude * v * np.abs(s) * np.exp(self.offset_ramp * s)
        else:
            y = x0 + self._perturbation(gen, dimension)
        y[-1] = x[-1]
        return x, y

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class Witness:
    """A sampled past (or pair) that attains a reported ratio or violation."""
    kind: str
    index: int
    value: float
    grid_step: float
    x: np.ndarray
    y: Optional[np.ndarray] = None

    def to_csv_text(self) -> str:
        d = self.x.shape[1]
        header = ["s"] + [f"x_{i + 1}" for i in range(d)]
        if self.y is not None:
            header += [f"y_{i + 1}" for i in range(d)]
        n = self.x.shape[0]
        s = -self.grid_step * np.arange(n - 1, -1, -1, dtype=float)
        lines = [",".join(header)]
        for j in range(n):
            row = [s[j], *self.x[j]] + ([*self.y[j]] if self.y is not None else [])
            lines.append(",".join(format(float(v), CSV_FLOAT_FORMAT) for v in row))
        return "\r\n".join(lines) + "\r\n"

    def to_dict(self):
        return {"kind": self.kind, "index": self.index, "value": self.value, "csv": self.to_csv_text()}


def _history(spec: DriftSpec, samples: np.ndarray, grid_step: float) -> PastHistory:
    return PastHistory(grid_step, samples, spec.kernels)


def lipschitz_ratio(spec: DriftSpec, x: np.ndarray, y: np.ndarray, grid_step: float,
                    rate: float) -> Tuple[float, float]:
    """(|a(x) - a(y)|, int e^{rate s} |x(s) - y(s)| ds) over the sampled window."""
    ax = evaluate(spec, _history(spec, x, grid_step))
    ay = evaluate(spec, _history(spec, y, grid_step))
    numerator = float(np.linalg.norm(ax - ay))
    denominator = float(quadrature_kernel(x - y, grid_step, rate, Transform.NORM)[0])
    return numerator, denominator


def _map_indices(func, n: int, threads: int) -> list:
    chunks = [range(lo, min(lo + ESTIMATOR_CHUNK, n)) for lo in range(0, n, ESTIMATOR_CHUNK)]
    if threads <= 1 or len(chunks) == 1:
        return [func(i) for chunk in chunks for i in chunk]
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="memsde-estimator") as pool:
        parts = list(pool.map(lambda c: [func(i) for i in c], chunks))
    return [item for part in parts for item in part]


@dataclass
class LipschitzEstimate:
    K_hat: float
    rate: float
    endpoint_bound: float
    witnesses: List[Witness]
    n_pairs: int
    n_skipped: int
    violations: List[Witness] = field(default_factory=list)
    endpoint_norms: Optional[np.ndarray] = None
    ratios: Optional[np.ndarray] = None

    def __iter__(self):
        yield self.K_hat
        yield self.witnesses


def estimate_lipschitz(spec: DriftSpec, rate: float, sampler: PathSampler, seed: int,
                       pairs: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
                       threads: int = 1) -> LipschitzEstimate:
    """K_hat = max |a(x) - a(y)| / int e^{rate s}|x - y| ds over pairs with x(0) = y(0).

    ``pairs`` overrides the sampler (explicit oracle constructions).
    """
    if not rate > 0.0:
        raise ParameterError(f"rate must be > 0, got {rate}")
    d = spec.dimension
    if pairs is None:
        n = sampler.n_pairs

        def get_pair(i):
            return sampler.draw_pair(seed, i, d)
    else:
        pairs = [(np.asarray(x, dtype=float).reshape(-1, d), np.asarray(y, dtype=float).reshape(-1, d))
                 for x, y in pairs]
        n = len(pairs)

        def get_pair(i):
            return pairs[i]

    def one(i):
        x, y = get_pair(i)
        if not np.array_equal(x[-1], y[-1]):
            raise EstimationError(f"Pair {i} has unequal endpoints {x[-1]} vs {y[-1]}")
        num, den = lipschitz_ratio(spec, x, y, sampler.grid_step, rate)
        return float(np.linalg.norm(x[-1])), num, den

    results = _map_indices(one, n, threads)
    norms = np.array([r[0] for r in results])
    ratios = np.full(n, np.nan)
    violations = []
    skipped = 0
    for i, (_, num, den) in enumerate(results):
        if den == 0.0:
            if num == 0.0:
                skipped += 1
            else:
                x, y = get_pair(i)
                violations.append(Witness(WitnessKind.LIPSCHITZ_ZERO_DISTANCE, i, num, sampler.grid_step, x, y))
            continue
        ratios[i] = num / den

    witnesses = []
    k_hat = 0.0
    if np.any(np.isfinite(ratios)):
        best = int(np.nanargmax(ratios))
        k_hat = float(ratios[best])
        x, y = get_pair(best)
        witnesses.append(Witness(WitnessKind.LIPSCHITZ, best, k_hat, sampler.grid_step, x, y))
    if violations:
        logger.warning(f"{len(violations)} pairs with zero kernel distance but different drift")
    bound = float(np.max(norms)) if pairs is not None and n else sampler.endpoint_bound
    return LipschitzEstimate(k_hat, rate, bound, witnesses, n, skipped, violations, norms, ratios)


def lipschitz_profile(spec: DriftSpec, rate: float, sampler: PathSampler, bounds: Sequence[float],
                      seed: int, threads: int = 1) -> List[Tuple[float, float]]:
    """K_hat(R) for each R in ``bounds`` from one nested draw; nondecreasing in R."""
    bounds = sorted(float(b) for b in bounds)
    if not bounds or bounds[0] <= 0.0:
        raise ParameterError("bounds must be a non-empty list of positive radii")
    widest = PathSampler(**{**sampler.to_dict(), "endpoint_bound": bounds[-1]})
    est = estimate_lipschitz(spec, rate, widest, seed, threads=threads)
    profile = []
    for bound in bounds:
        mask = (est.endpoint_norms <= bound) & np.isfinite(est.ratios)
        profile.append((bound, float(np.max(est.ratios[mask])) if np.any(mask) else 0.0))
    return profile


def _single_samples(spec: DriftSpec, sampler: PathSampler, seed: int, threads: int):
    d = spec.dimension

    def one(i):
        x = sampler.draw_path(seed, i, d)
        a = evaluate(spec, _history(spec, x, sampler.grid_step))
        x0 = x[-1]
        return float(np.dot(a, x0)), float(np.dot(x0, x0)), float(np.linalg.norm(a)), float(np.linalg.norm(x0))

    results = np.array(_map_indices(one, sampler.n_pairs, threads), dtype=float)
    return results[:, 0], results[:, 1], results[:, 2], results[:, 3]


@dataclass
class DissipativityEstimate:
    C1_hat: float
    C2_hat: float
    violated: bool
    witnesses: List[Witness]
    n_samples: int
    stage: str

    def __iter__(self):
        yield self.C1_hat
        yield self.C2_hat
        yield self.witnesses


def _grid_floor(value: float, resolution: float) -> float:
    k = math.floor(value / resolution + 1e-9)
    return k / round(1.0 / resolution)


def estimate_dissipativity(spec: DriftSpec, sampler: PathSampler, seed: int,
                           c1_budget: float = DEFAULT_C1_BUDGET,
                           resolution: float = C2_RESOLUTION, threads: int = 1) -> DissipativityEstimate:
    """Envelope fit of (a(x), x(0)) <= C1 - C2 |x(0)|^2.

    First try C1 = 0 with the largest grid C2; then allow C1 <= c1_budget and
    take the largest grid C2 with zero violations, C1 the max residual.
    """
    ip, r2, _, _ = _single_samples(spec, sampler, seed, threads)
    n = ip.size
    positive = r2 > 0.0
    slack = ENVELOPE_TOL * (1.0 + r2)

    if np.all(ip[~positive] <= slack[~positive]) and np.any(positive):
        c2_max = float(np.min((slack[positive] - ip[positive]) / r2[positive]))
        c2 = _grid_floor(c2_max, resolution) if c2_max > 0.0 else 0.0
        if c2 > 0.0:
            return DissipativityEstimate(0.0, c2, False, [], n, "zero_intercept")

    if np.all(ip[~positive] <= c1_budget) and np.any(positive):
        c2_max = float(np.min((c1_budget - ip[positive]) / r2[positive]))
        c2 = _grid_floor(c2_max, resolution) if c2_max > 0.0 else 0.0
        if c2 > 0.0:
            c1 = max(0.0, float(np.max(ip + c2 * r2)))
            return DissipativityEstimate(c1, c2, False, [], n, "budgeted_intercept")

    residual = ip + resolution * r2
    worst = int(np.argmax(residual))
    x = sampler.draw_path(seed, worst, spec.dimension)
    witness = Witness(WitnessKind.DISSIPATIVITY, worst, float(ip[worst]), sampler.grid_step, x)
    logger.warning(f"No C2 > 0 fits the dissipativity envelope (worst (a, x0) = {ip[worst]:.6g} at sample {worst})")
    return DissipativityEstimate(max(0.0, float(np.max(ip))), 0.0, True, [witness], n, "violated")


@dataclass
class GrowthEstimate:
    C3_hat: float
    witnesses: List[Witness]
    violations: List[Witness]
    n_samples: int
    endpoint_norms: Optional[np.ndarray] = None
    ratios: Optional[np.ndarray] = None

    def __iter__(self):
        yield self.C3_hat
        yield self.witnesses


def estimate_growth(spec: DriftSpec, sampler: PathSampler, seed: int, threads: int = 1) -> GrowthEstimate:
    """C3_hat = max |a(x)| / |x(0)|; a nonzero drift at x(0) = 0 is a violation."""
    _, _, a_norm, x_norm = _single_samples(spec, sampler, seed, threads)
    n = a_norm.size
    ratios = np.full(n, np.nan)
    nonzero = x_norm > 0.0
    ratios[nonzero] = a_norm[nonzero] / x_norm[nonzero]
    violations = []
    bad = np.nonzero(~nonzero & (a_norm > 0.0))[0]
    if bad.size:
        worst = int(bad[np.argmax(a_norm[bad])])
        violations.append(Witness(WitnessKind.GROWTH_ZERO_ENDPOINT, worst, float(a_norm[worst]),
                                  sampler.grid_step, sampler.draw_path(seed, worst, spec.dimension)))
        logger.warning(f"{bad.size} samples with x(0) = 0 and nonzero drift")
    witnesses = []
    c3 = 0.0
    if np.any(nonzero):
        best = int(np.nanargmax(ratios))
        c3 = float(ratios[best])
        witnesses.append(Witness(WitnessKind.GROWTH, best, c3, sampler.grid_step,
                                 sampler.draw_path(seed, best, spec.dimension)))
    return GrowthEstimate(c3, witnesses, violations, n, x_norm, ratios)


def growth_profile(spec: DriftSpec, sampler: PathSampler, bounds: Sequence[float], seed: int,
                   threads: int = 1) -> List[Tuple[float, float]]:
    """C3_hat(R) for each R in ``bounds`` from one nested draw; nondecreasing in R."""
    bounds = sorted(float(b) for b in bounds)
    if not bounds or bounds[0] <= 0.0:
        raise ParameterError("bounds must be a non-empty list of positive radii")
    widest = PathSampler(**{**sampler.to_dict(), "endpoint_bound": bounds[-1]})
    est = estimate_growth(spec, widest, seed, threads=threads)
    profile = []
    for bound in bounds:
        mask = (est.endpoint_norms <= bound) & np.isfinite(est.ratios)
        profile.append((bound, float(np.max(est.ratios[mask])) if np.any(mask) else 0.0))
    return profile


def reevaluate_witness(spec: DriftSpec, witness: Witness, rate: Optional[float] = None) -> float:
    """Recompute the quantity a witness claims (ratio, inner product or drift norm)."""
    if witness.kind == WitnessKind.LIPSCHITZ:
        num, den = lipschitz_ratio(spec, witness.x, witness.y, witness.grid_step, rate)
        return num / den
    if witness.kind == WitnessKind.LIPSCHITZ_ZERO_DISTANCE:
        return lipschitz_ratio(spec, witness.x, witness.y, witness.grid_step, rate)[0]
    a = evaluate(spec, _history(spec, witness.x, witness.grid_step))
    x0 = witness.x[-1]
    if witness.kind == WitnessKind.DISSIPATIVITY:
        return float(np.dot(a, x0))
    if witness.kind == WitnessKind.GROWTH:
        return float(np.linalg.norm(a)) / float(np.linalg.norm(x0))
    return float(np.linalg.norm(a))


@dataclass
class ConditionReport:
    K_hat: float
    C1_hat: float
    C2_hat: float
    C3_hat: float
    domain_bound: float
    rate: float
    n_samples: int
    violations: Dict[str, bool]
    witnesses: List[Witness]
    lipschitz_profile: List[Tuple[float, float]]
    declared: Dict[str, str]
    analytic: Dict[str, Optional[float]]
    growth_profile: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def any_violation(self) -> bool:
        return any(self.violations.values())

    def to_dict(self):
        return {
            "K_hat": self.K_hat, "C1_hat": self.C1_hat, "C2_hat": self.C2_hat, "C3_hat": self.C3_hat,
            "domain_bound": self.domain_bound, "rate": self.rate, "n_samples": self.n_samples,
            "violations": dict(self.violations),
            "witnesses": [w.to_dict() for w in self.witnesses],
            "lipschitz_profile": [{"R": r, "K_hat": k} for r, k in self.lipschitz_profile],
            "growth_profile": [{"R": r, "C3_hat": c} for r, c in self.growth_profile],
            "declared_conditions": dict(self.declared),
            "analytic_constants": dict(self.analytic),
        }


def check_conditions(spec: DriftSpec, sampler: PathSampler, seed: int, rate: Optional[float] = None,
                     bounds: Optional[Sequence[float]] = None, c1_budget: float = DEFAULT_C1_BUDGET,
                     threads: int = 1) -> ConditionReport:
    """All three estimators on one sampler; K is reported with its domain bound R."""
    rate = rate if rate is not None else (spec.family.memory_rate or 1.0)
    lip = estimate_lipschitz(spec, rate, sampler, seed, threads=threads)
    diss = estimate_dissipativity(spec, sampler, seed, c1_budget=c1_budget, threads=threads)
    growth = estimate_growth(spec, sampler, seed, threads=threads)
    bounds = bounds or [sampler.endpoint_bound * f for f in (0.25, 0.5, 1.0)]
    profile = lipschitz_profile(spec, rate, sampler, bounds, seed, threads=threads)
    c3_profile = growth_profile(spec, sampler, bounds, seed, threads=threads)
    family = spec.family
    diss_constants = family.dissipativity_constants()
    report = ConditionReport(
        K_hat=lip.K_hat, C1_hat=diss.C1_hat, C2_hat=diss.C2_hat, C3_hat=growth.C3_hat,
        domain_bound=sampler.endpoint_bound, rate=rate, n_samples=sampler.n_pairs,
        violations={"lipschitz": bool(lip.violations), "dissipativity": diss.violated,
                    "growth": bool(growth.violations)},
        witnesses=lip.witnesses + lip.violations + diss.witnesses + growth.witnesses + growth.violations,
        lipschitz_profile=profile,
        declared=family.declared_conditions,
        analytic={"K": family.lipschitz_bound(sampler.endpoint_bound, rate),
                  "C1": None if diss_constants is None else diss_constants[0],
                  "C2": None if diss_constants is None else diss_constants[1],
                  "C3": family.growth_constant()},
        growth_profile=c3_profile,
    )
    logger.info(f"Conditions: K_hat={report.K_hat:.6g} (R={report.domain_bound}) C1_hat={report.C1_hat:.6g} "
                f"C2_hat={report.C2_hat:.6g} C3_hat={report.C3_hat:.6g} violations={report.violations}")
    return report
