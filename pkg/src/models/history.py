"""
Past histories of a path on (-inf, 0] and their exponential memory integrals.

A ``PastHistory`` keeps a finite window of grid samples (most recent last), one
running accumulator per registered kernel ``(rate, transform)`` and a
parametric ``TailModel`` for the part of the past that was never sampled.
Memory integrals ``int_{-inf}^0 e^{rate*s} phi(x(s)) ds`` are then available in
O(1) after every new sample, which is all the drift functionals ever need.

Path records (``PathRecord``) are the full-line counterpart used for splicing,
time shifts and CSV output.
"""
import csv
import functools
import hashlib
import io
import json
import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from src.errors import HistoryError

logger = logging.getLogger("History")

# --- Constants ---
# Two grid steps closer than this (relative) describe the same grid.
GRID_STEP_RTOL = 1e-12
# A time shift must land this close (in grid steps) to a node.
SHIFT_SNAP_TOL = 1e-9
# 17 significant digits round-trip every double exactly.
CSV_FLOAT_FORMAT = ".17g"


class Transform:
    """Identifiers of the maps phi applied to x(s) inside a memory integral."""
    IDENTITY = "identity"
    TANH = "tanh"      # per-coordinate nonlinearity
    NORM = "norm"      # Euclidean norm, a scalar
    ALL = (IDENTITY, TANH, NORM)


class KernelKey(NamedTuple):
    rate: float
    transform: str = Transform.IDENTITY


def apply_transform(transform: str, values) -> np.ndarray:
    """phi applied along the last axis; NORM keeps a trailing axis of length 1."""
    values = np.asarray(values, dtype=float)
    if transform == Transform.IDENTITY:
        return values
    if transform == Transform.TANH:
        return np.tanh(values)
    if transform == Transform.NORM:
        return np.sqrt(np.sum(values * values, axis=-1, keepdims=True))
    raise HistoryError(f"Unknown transform: {transform!r}")


def transform_width(transform: str, dimension: int) -> int:
    if transform not in Transform.ALL:
        raise HistoryError(f"Unknown transform: {transform!r}")
    return 1 if transform == Transform.NORM else dimension


def decay_factor(rate: float, dt: float) -> float:
    return math.exp(-rate * dt)


def kernel_step(value, prev_phi, new_phi, decay: float, half_dt: float):
    """Exact-decay accumulator update with a trapezoid over the newest segment.

    A <- e^{-rate*dt} A + dt/2 (e^{-rate*dt} phi(x_prev) + phi(x_new)).
    Works on any leading batch shape; every engine goes through this function
    so single paths and ensembles produce the same bits.
    """
    return decay * value + half_dt * (decay * prev_phi + new_phi)


def quadrature_kernel(samples, grid_step: float, rate: float,
                      transform: str = Transform.IDENTITY) -> np.ndarray:
    """Brute-force trapezoid of e^{rate*s} phi(x(s)) over a sampled window.

    ``samples`` has shape (L, d) with the most recent sample (s = 0) last.
    """
    samples = _as_samples(samples)
    n = samples.shape[0]
    s = -grid_step * np.arange(n - 1, -1, -1, dtype=float)
    weighted = np.exp(rate * s)[:, None] * apply_transform(transform, samples)
    if n == 1:
        return np.zeros(weighted.shape[1])
    return trapezoid(weighted, dx=grid_step, axis=0)


def _as_samples(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise HistoryError(f"Expected samples of shape (L, d), got {arr.shape}")
    return arr


# --- Tail model ---

@dataclass(frozen=True)
class TailModel:
    """Unsampled past beyond the window: x(s) = c + K' e^{rate'|s|} u.

    The tail lives in the frame where the history was built; after an elapsed
    time t its contribution to a kernel of rate lambda is its initial value
    times e^{-lambda t}.
    """
    constant: Tuple[float, ...] = ()
    amplitude: float = 0.0
    rate: float = 0.0
    direction: Tuple[float, ...] = ()

    @classmethod
    def zero(cls) -> "TailModel":
        return cls()

    @classmethod
    def exponential(cls, amplitude: float, rate: float,
                    direction: Optional[Sequence[float]] = None) -> "TailModel":
        return cls(amplitude=float(amplitude), rate=float(rate),
                   direction=tuple(float(v) for v in direction) if direction is not None else ())

    @classmethod
    def constant_value(cls, value: Sequence[float]) -> "TailModel":
        return cls(constant=tuple(float(v) for v in np.atleast_1d(value)))

    @property
    def kind(self) -> str:
        has_c = any(v != 0.0 for v in self.constant)
        has_e = self.amplitude > 0.0
        if has_c and has_e:
            return "shifted_exponential_tail"
        if has_e:
            return "exponential_tail"
        if has_c:
            return "constant_tail"
        return "zero_tail"

    def validate(self, dimension: int, kernel_rates: Iterable[float] = ()):
        if self.constant and len(self.constant) != dimension:
            raise HistoryError(f"Tail constant has {len(self.constant)} coordinates, expected {dimension}")
        if self.amplitude < 0.0 or not math.isfinite(self.amplitude):
            raise HistoryError(f"Tail amplitude must be finite and >= 0, got {self.amplitude}")
        if self.amplitude > 0.0:
            if not self.rate > 0.0:
                raise HistoryError(f"Exponential tail rate must be > 0, got {self.rate}")
            for rate in kernel_rates:
                if self.rate >= rate:
                    raise HistoryError(
                        f"Exponential tail rate {self.rate} must be below every kernel rate (got {rate})")
        if self.direction:
            if len(self.direction) != dimension:
                raise HistoryError(f"Tail direction has {len(self.direction)} coordinates, expected {dimension}")
            if not math.isclose(float(np.linalg.norm(self.direction)), 1.0, rel_tol=1e-9):
                raise HistoryError("Tail direction must be a unit vector")

    def _constant_vector(self, dimension: int) -> np.ndarray:
        return np.array(self.constant, dtype=float) if self.constant else np.zeros(dimension)

    def _direction_vector(self, dimension: int) -> np.ndarray:
        if self.direction:
            return np.array(self.direction, dtype=float)
        u = np.zeros(dimension)
        u[0] = 1.0
        return u

    def value_at(self, s, dimension: int) -> np.ndarray:
        """Tail path evaluated at times s <= 0, shape (len(s), d)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.broadcast_to(self._constant_vector(dimension), (s.size, dimension)).copy()
        if self.amplitude > 0.0:
            out += self.amplitude * np.exp(self.rate * np.abs(s))[:, None] * self._direction_vector(dimension)
        return out

    def to_dict(self):
        return {"kind": self.kind, "constant": list(self.constant), "amplitude": self.amplitude,
                "rate": self.rate, "direction": list(self.direction)}

    @classmethod
    def from_dict(cls, data) -> "TailModel":
        return cls(constant=tuple(data.get("constant", ())), amplitude=float(data.get("amplitude", 0.0)),
                   rate=float(data.get("rate", 0.0)), direction=tuple(data.get("direction", ())))


@functools.lru_cache(maxsize=256)
def _tail_base(tail: TailModel, rate: float, transform: str, span: float,
               dimension: int) -> Tuple[float, ...]:
    width = transform_width(transform, dimension)
    kind = tail.kind
    if kind == "zero_tail":
        return (0.0,) * width
    if tail.amplitude > 0.0 and tail.rate >= rate:
        raise HistoryError(f"Tail rate {tail.rate} >= kernel rate {rate}: tail integral diverges")
    c = tail._constant_vector(dimension)
    u = tail._direction_vector(dimension)
    const_weight = math.exp(-rate * span) / rate
    exp_weight = 0.0
    if tail.amplitude > 0.0:
        exp_weight = tail.amplitude * math.exp(-(rate - tail.rate) * span) / (rate - tail.rate)
    if transform == Transform.IDENTITY:
        base = c * const_weight + u * exp_weight
    elif transform == Transform.NORM:
        if kind == "shifted_exponential_tail":
            raise HistoryError("Norm kernel of a shifted exponential tail has no closed form")
        base = np.array([float(np.linalg.norm(c)) * const_weight + exp_weight])
    else:
        if tail.amplitude > 0.0:
            raise HistoryError("tanh kernel of an exponential tail has no closed form")
        base = np.tanh(c) * const_weight
    return tuple(float(v) for v in base)


def tail_contribution(tail: TailModel, rate: float, transform: str, span: float,
                      dimension: int, elapsed: float) -> np.ndarray:
    """Closed-form tail part of a memory integral after ``elapsed`` time units."""
    base = np.array(_tail_base(tail, float(rate), transform, float(span), int(dimension)))
    return base * math.exp(-rate * elapsed)


# --- Accumulators and histories ---

@dataclass(frozen=True)
class KernelAccumulator:
    """Running value of the windowed part of int e^{rate*s} phi(x(s)) ds."""
    rate: float
    transform: str
    value: np.ndarray

    @property
    def key(self) -> KernelKey:
        return KernelKey(self.rate, self.transform)

    def to_dict(self):
        return {"rate": self.rate, "transform": self.transform, "value": [float(v) for v in self.value]}


class _SampleTape:
    """Append-only sample storage shared by successive PastHistory values.

    A history may append in place only when it owns the end of the tape;
    any other history copies its window to a fresh tape first.
    """

    def __init__(self, samples: np.ndarray, capacity: int):
        capacity = max(capacity, samples.shape[0] + 1)
        self.data = np.empty((capacity, samples.shape[1]))
        self.data[:samples.shape[0]] = samples
        self.size = samples.shape[0]
        self.lock = threading.Lock()

    def try_append(self, stop: int, value: np.ndarray) -> bool:
        with self.lock:
            if stop != self.size or self.size == self.data.shape[0]:
                return False
            self.data[stop] = value
            self.size += 1
            return True


class PastHistory:
    """An element of C_-: a sampled window on [-T_w, 0] plus memory state.

    Values are immutable; ``push_sample`` returns a new history.
    """

    def __init__(self, grid_step: float, window, kernels: Iterable[KernelKey] = (),
                 tail_model: Optional[TailModel] = None, window_span: Optional[float] = None,
                 accumulator_values: Optional[Dict[KernelKey, Sequence[float]]] = None,
                 steps: int = 0, tail_span: Optional[float] = None):
        grid_step = float(grid_step)
        if not grid_step > 0.0 or not math.isfinite(grid_step):
            raise HistoryError(f"grid_step must be > 0, got {grid_step}")
        samples = _as_samples(window)
        dimension = samples.shape[1]
        tail_model = tail_model or TailModel.zero()
        keys = [KernelKey(float(k[0]), k[1]) for k in kernels]
        for key in keys:
            if not key.rate > 0.0:
                raise HistoryError(f"Kernel rate must be > 0, got {key.rate}")
            transform_width(key.transform, dimension)
        tail_model.validate(dimension, [k.rate for k in keys])

        if window_span is None:
            max_samples = samples.shape[0]
        else:
            max_samples = max(int(round(float(window_span) / grid_step)) + 1, 1)

        # accumulators see every given sample, the stored window only the newest ones
        accumulators = []
        for key in dict.fromkeys(keys):
            if accumulator_values is not None and key in accumulator_values:
                value = np.array(accumulator_values[key], dtype=float)
            else:
                value = quadrature_kernel(samples, grid_step, key.rate, key.transform)
            accumulators.append(KernelAccumulator(key.rate, key.transform, value))
        full_span = (samples.shape[0] - 1) * grid_step
        if samples.shape[0] > max_samples:
            samples = samples[-max_samples:]

        self._grid_step = grid_step
        self._max_samples = max_samples
        self._tape = _SampleTape(samples, 2 * max_samples)
        self._start = 0
        self._stop = samples.shape[0]
        self._accumulators = tuple(accumulators)
        self._tail_model = tail_model
        self._tail_span = float(tail_span) if tail_span is not None else full_span
        self._steps = int(steps)

    @classmethod
    def _assemble(cls, source: "PastHistory", tape: _SampleTape, start: int, stop: int,
                  accumulators: Tuple[KernelAccumulator, ...], steps: int) -> "PastHistory":
        new = cls.__new__(cls)
        new._grid_step = source._grid_step
        new._max_samples = source._max_samples
        new._tape = tape
        new._start = start
        new._stop = stop
        new._accumulators = accumulators
        new._tail_model = source._tail_model
        new._tail_span = source._tail_span
        new._steps = steps
        return new

    # --- Constructors for analytic and sampled pasts ---

    @classmethod
    def from_samples(cls, samples, grid_step: float, kernels: Iterable[KernelKey] = (),
                     tail_model: Optional[TailModel] = None,
                     window_span: Optional[float] = None) -> "PastHistory":
        return cls(grid_step, samples, kernels, tail_model=tail_model, window_span=window_span)

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], dimension: int,
                      grid_step: float, window_span: float, kernels: Iterable[KernelKey] = (),
                      tail_model: Optional[TailModel] = None) -> "PastHistory":
        """Sample an analytic past on [-window_span, 0]; the tail stays closed-form."""
        n = int(round(window_span / grid_step)) + 1
        s = -grid_step * np.arange(n - 1, -1, -1, dtype=float)
        values = np.asarray(func(s), dtype=float).reshape(n, dimension)
        return cls(grid_step, values, kernels, tail_model=tail_model)

    @classmethod
    def constant(cls, value, grid_step: float, window_span: float,
                 kernels: Iterable[KernelKey] = ()) -> "PastHistory":
        c = np.atleast_1d(np.asarray(value, dtype=float))
        return cls.from_function(lambda s: np.broadcast_to(c, (s.size, c.size)), c.size, grid_step,
                                 window_span, kernels, tail_model=TailModel.constant_value(c))

    @classmethod
    def zeros(cls, dimension: int, grid_step: float, window_span: float,
              kernels: Iterable[KernelKey] = ()) -> "PastHistory":
        return cls.constant(np.zeros(dimension), grid_step, window_span, kernels)

    @classmethod
    def from_tail(cls, tail_model: TailModel, dimension: int, grid_step: float,
                  window_span: float, kernels: Iterable[KernelKey] = ()) -> "PastHistory":
        """Past that follows its tail model on the window too."""
        return cls.from_function(lambda s: tail_model.value_at(s, dimension), dimension, grid_step,
                                 window_span, kernels, tail_model=tail_model)

    # --- Accessors ---

    @property
    def grid_step(self) -> float:
        return self._grid_step

    @property
    def window(self) -> np.ndarray:
        view = self._tape.data[self._start:self._stop]
        view.flags.writeable = False
        return view

    @property
    def current(self) -> np.ndarray:
        return self.window[-1]

    @property
    def dimension(self) -> int:
        return self._tape.data.shape[1]

    @property
    def accumulators(self) -> Tuple[KernelAccumulator, ...]:
        return self._accumulators

    @property
    def kernels(self) -> Tuple[KernelKey, ...]:
        return tuple(acc.key for acc in self._accumulators)

    @property
    def tail_model(self) -> TailModel:
        return self._tail_model

    @property
    def tail_span(self) -> float:
        return self._tail_span

    @property
    def window_span(self) -> float:
        return (self._max_samples - 1) * self._grid_step

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def elapsed(self) -> float:
        return self._steps * self._grid_step

    def __len__(self):
        return self._stop - self._start

    def _find(self, rate: float, transform: str) -> Optional[KernelAccumulator]:
        for acc in self._accumulators:
            if acc.transform == transform and math.isclose(acc.rate, rate, rel_tol=1e-12):
                return acc
        return None

    def has_kernel(self, rate: float, transform: str = Transform.IDENTITY) -> bool:
        return self._find(rate, transform) is not None

    def accumulator(self, rate: float, transform: str = Transform.IDENTITY) -> KernelAccumulator:
        acc = self._find(rate, transform)
        if acc is None:
            raise HistoryError(f"No accumulator registered for rate={rate}, transform={transform!r}")
        return acc

    def tail_part(self, rate: float, transform: str = Transform.IDENTITY) -> np.ndarray:
        return tail_contribution(self._tail_model, rate, transform, self._tail_span,
                                 self.dimension, self.elapsed)

    def kernel_integral(self, rate: float, transform: str = Transform.IDENTITY) -> np.ndarray:
        """Accumulator value plus closed-form tail: int_{-inf}^0 e^{rate*s} phi(x(s)) ds."""
        acc = self._find(rate, transform)
        if acc is None:
            raise HistoryError(f"No accumulator registered for rate={rate}, transform={transform!r}")
        return acc.value + tail_contribution(self._tail_model, acc.rate, acc.transform,
                                             self._tail_span, self.dimension, self.elapsed)

    # --- Dynamics ---

    def push_sample(self, dt: float, value) -> "PastHistory":
        """Advance pi_t by dt with x(0) = value; O(1) in the window length."""
        if not dt > 0.0:
            raise HistoryError(f"dt must be > 0, got {dt}")
        if not math.isclose(dt, self._grid_step, rel_tol=GRID_STEP_RTOL):
            raise HistoryError(f"dt={dt} differs from grid_step={self._grid_step}; multi-rate grids are not supported")
        v = np.asarray(value, dtype=float)
        if v.shape != (self.dimension,):
            raise HistoryError(f"Sample has shape {v.shape}, expected ({self.dimension},)")

        half_dt = 0.5 * self._grid_step
        current = self.current
        phis = {}
        accumulators = []
        for acc in self._accumulators:
            if acc.transform not in phis:
                phis[acc.transform] = (apply_transform(acc.transform, current),
                                       apply_transform(acc.transform, v))
            prev_phi, new_phi = phis[acc.transform]
            decay = decay_factor(acc.rate, self._grid_step)
            accumulators.append(KernelAccumulator(
                acc.rate, acc.transform, kernel_step(acc.value, prev_phi, new_phi, decay, half_dt)))

        tape, start, stop = self._tape, self._start, self._stop
        if not tape.try_append(stop, v):
            live = tape.data[start:stop]
            tape = _SampleTape(live, 2 * self._max_samples)
            start, stop = 0, live.shape[0]
            tape.try_append(stop, v)
        stop += 1
        start = max(start, stop - self._max_samples)
        return PastHistory._assemble(self, tape, start, stop, tuple(accumulators), self._steps + 1)

    # --- Serialization ---

    def to_dict(self):
        return {
            "grid_step": self._grid_step,
            "window": [[float(v) for v in row] for row in self.window],
            "window_span": self.window_span,
            "tail_model": self._tail_model.to_dict(),
            "tail_span": self._tail_span,
            "steps": self._steps,
            "accumulators": [acc.to_dict() for acc in self._accumulators],
        }

    @classmethod
    def from_dict(cls, data) -> "PastHistory":
        kernels = [KernelKey(float(a["rate"]), a["transform"]) for a in data.get("accumulators", [])]
        values = {KernelKey(float(a["rate"]), a["transform"]): a["value"] for a in data.get("accumulators", [])}
        return cls(data["grid_step"], data["window"], kernels,
                   tail_model=TailModel.from_dict(data.get("tail_model", {})),
                   window_span=data.get("window_span"), accumulator_values=values,
                   steps=data.get("steps", 0), tail_span=data.get("tail_span"))

    def fingerprint(self) -> str:
        """Short content hash used to tag trajectories with their initial history."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def __repr__(self):
        return (f"<PastHistory d={self.dimension} samples={len(self)} dt={self._grid_step} "
                f"tail={self._tail_model.kind} kernels={list(self.kernels)}>")


def kernel_distance(x_past: PastHistory, y_past: PastHistory, rate: float) -> float:
    """int e^{rate*s} |x(s) - y(s)| ds over the common window (tails must agree)."""
    if not math.isclose(x_past.grid_step, y_past.grid_step, rel_tol=GRID_STEP_RTOL):
        raise HistoryError("Histories live on different grids")
    if x_past.tail_model != y_past.tail_model:
        raise HistoryError("kernel_distance needs identical tail models")
    n = min(len(x_past), len(y_past))
    diff = x_past.window[-n:] - y_past.window[-n:]
    return float(quadrature_kernel(diff, x_past.grid_step, rate, Transform.NORM)[0])


def lu_metric(f, g, n_max: int, grid_step: Optional[float] = None) -> float:
    """Truncated rho_-(f, g) = sum_{n<=n_max} 2^-n min(max_{-n<=t<=0} |f-g|, 1).

    ``f`` and ``g`` are sampled paths on the same grid (most recent last) or
    PastHistory values. The truncation error is at most 2^-n_max.
    """
    if isinstance(f, PastHistory) or isinstance(g, PastHistory):
        if not (isinstance(f, PastHistory) and isinstance(g, PastHistory)):
            raise HistoryError("lu_metric needs two histories or two sampled paths")
        if not math.isclose(f.grid_step, g.grid_step, rel_tol=GRID_STEP_RTOL):
            raise HistoryError("Histories live on different grids")
        grid_step = f.grid_step
        f, g = f.window, g.window
    if grid_step is None or not grid_step > 0.0:
        raise HistoryError("lu_metric needs a positive grid_step")
    f = _as_samples(f)
    g = _as_samples(g)
    if f.shape != g.shape:
        raise HistoryError(f"Grid mismatch: {f.shape} vs {g.shape}")
    n_max = int(n_max)
    if n_max < 1:
        raise HistoryError("n_max must be a positive integer")
    available = (f.shape[0] - 1) * grid_step
    if n_max > available * (1.0 + 1e-12):
        raise HistoryError(f"n_max={n_max} exceeds the stored window of {available}")

    running = np.maximum.accumulate(np.linalg.norm(f - g, axis=1)[::-1])
    total = 0.0
    for n in range(1, n_max + 1):
        idx = min(int(round(n / grid_step)), running.size - 1)
        total += 2.0 ** -n * min(float(running[idx]), 1.0)
    return total


# --- Path records ---

@dataclass(frozen=True, eq=False)
class PathRecord:
    """A path (X, W) on the grid t_j = (start_index + j) * grid_step.

    W is stored raw and evaluated as w_raw - w_raw[anchor], so re-anchoring
    under a shift never touches stored values. NaN marks unknown W (pasts).
    """
    grid_step: float
    start_index: int
    x: np.ndarray
    w_raw: np.ndarray
    anchor: int

    @property
    def times(self) -> np.ndarray:
        return (self.start_index + np.arange(self.x.shape[0])) * self.grid_step

    @property
    def w(self) -> np.ndarray:
        return self.w_raw - self.w_raw[self.anchor]

    @property
    def dimension(self) -> int:
        return self.x.shape[1]

    def index_of(self, t: float) -> int:
        m = t / self.grid_step
        k = int(round(m))
        if abs(m - k) > SHIFT_SNAP_TOL:
            raise HistoryError(f"t={t} is not on the grid of step {self.grid_step}")
        pos = k - self.start_index
        if not 0 <= pos < self.x.shape[0]:
            raise HistoryError(f"t={t} is outside the stored range")
        return pos

    def same_as(self, other: "PathRecord") -> bool:
        """Bitwise equality of the evaluated record."""
        return (self.grid_step == other.grid_step and self.start_index == other.start_index
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.w, other.w, equal_nan=True))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        d = self.dimension
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + [f"w_{i + 1}" for i in range(d)])
        for t, xr, wr in zip(self.times, self.x, self.w):
            writer.writerow([format(float(v), CSV_FLOAT_FORMAT) for v in (t, *xr, *wr)])
        return buf.getvalue()


def splice(y_past: PastHistory, x_future, mode: str = "girsanov") -> PathRecord:
    """Path equal to y_past on s < 0 and to the trajectory x_future on s >= 0.

    In "girsanov" mode the endpoints must agree (x_-(0) = y_-(0)) so the
    result is continuous at 0; "coupling" mode allows a jump.
    """
    if mode not in ("girsanov", "coupling"):
        raise HistoryError(f"Unknown splice mode {mode!r}")
    if not math.isclose(y_past.grid_step, x_future.grid_step, rel_tol=GRID_STEP_RTOL):
        raise HistoryError("Past and future live on different grids")
    future_x = np.asarray(x_future.x_values, dtype=float)
    future_w = np.asarray(x_future.w_values, dtype=float)
    if future_x.shape[1] != y_past.dimension:
        raise HistoryError("Past and future have different dimensions")
    if mode == "girsanov" and not np.array_equal(y_past.current, future_x[0]):
        raise HistoryError(
            f"Girsanov splice needs equal endpoints: {y_past.current} vs {future_x[0]}")
    past = y_past.window[:-1]
    n_past = past.shape[0]
    x = np.concatenate([past, future_x], axis=0)
    w_raw = np.concatenate([np.full_like(past, np.nan), future_w], axis=0)
    return PathRecord(y_past.grid_step, -n_past, x, w_raw, anchor=n_past)


def shift(record: PathRecord, s: float) -> PathRecord:
    """theta_s: X~(t) = X(t - s), W~(t) = W(t - s) - W(-s).

    ``shift(record, -s)`` with s > 0 is the record seen from time s onwards.
    """
    m = s / record.grid_step
    k = int(round(m))
    if abs(m - k) > SHIFT_SNAP_TOL:
        raise HistoryError(f"Shift {s} is not a whole number of grid steps")
    # the new origin sits at old time -s
    anchor = -k - record.start_index
    if not 0 <= anchor < record.x.shape[0] or np.any(np.isnan(record.w_raw[anchor])):
        raise HistoryError(f"Insufficient stored range to re-anchor W for shift {s}")
    return PathRecord(record.grid_step, record.start_index + k, record.x, record.w_raw, anchor)
