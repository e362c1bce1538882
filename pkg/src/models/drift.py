"""
Drift functionals a: C_- -> R^d.

Each family only looks at the current value x_-(0) and at exponential memory
integrals K_id = int_{-inf}^0 e^{lambda s} x_-(s) ds, so a drift is evaluated
from a PastHistory's accumulators (single path) or from batched accumulator
arrays (ensemble engine) with the same code.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import ClassVar, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.errors import DriftError
from src.models.history import KernelKey, PastHistory, Transform

logger = logging.getLogger("Drift")


class FamilyName:
    """Tags used in config files and JSON sidecars."""
    OU = "ou"
    MODULATED_DAMPING = "modulated_damping"
    LINEAR_DISTRIBUTED_DELAY = "linear_distributed_delay"
    COMPOSITE = "composite"


class Condition:
    LIPSCHITZ = "lipschitz"          # memory Lipschitz bound with exponential kernel
    DISSIPATIVITY = "dissipativity"  # (a, x(0)) <= C1 - C2 |x(0)|^2
    GROWTH = "growth"                # |a| <= C3 |x(0)|


# Domain labels for declared_conditions
GLOBAL = "global"
BOUNDED_ENDPOINT = "|x_-(0)| <= R"
VIOLATED = "violated"


def _unit_direction(direction: Optional[Tuple[float, ...]], dimension: int) -> np.ndarray:
    if direction is None:
        u = np.zeros(dimension)
        u[0] = 1.0
        return u
    u = np.asarray(direction, dtype=float)
    if u.shape != (dimension,):
        raise DriftError(f"direction has {u.size} coordinates, expected {dimension}")
    return u


def _positive(name: str, value: float):
    if not (math.isfinite(value) and value > 0.0):
        raise DriftError(f"{name} must be > 0, got {value}")


class DriftFamily(ABC):
    """A drift family: formula, required kernels and declared constants."""
    name: ClassVar[str] = ""

    @abstractmethod
    def kernels(self) -> Tuple[KernelKey, ...]:
        ...

    @abstractmethod
    def drift(self, current: np.ndarray, memory: Mapping[KernelKey, np.ndarray]) -> np.ndarray:
        """Drift for ``current`` of shape (..., d) and memory arrays of shape (..., width)."""

    @abstractmethod
    def lipschitz_bound(self, endpoint_bound: float, rate: float) -> Optional[float]:
        """Analytic K for kernel rate ``rate`` on |x_-(0)| <= endpoint_bound, None if unbounded."""

    @abstractmethod
    def dissipativity_constants(self) -> Optional[Tuple[float, float]]:
        ...

    @abstractmethod
    def growth_constant(self) -> Optional[float]:
        ...

    @property
    @abstractmethod
    def declared_conditions(self) -> Dict[str, str]:
        ...

    @property
    def memory_rate(self) -> Optional[float]:
        rates = [k.rate for k in self.kernels()]
        return min(rates) if rates else None

    def validate(self, dimension: int):
        pass

    @abstractmethod
    def to_dict(self) -> dict:
        ...


@dataclass(frozen=True)
class OrnsteinUhlenbeck(DriftFamily):
    """a(x_-) = -b x_-(0)."""
    b: float
    name: ClassVar[str] = FamilyName.OU

    def __post_init__(self):
        _positive("b", self.b)

    def kernels(self):
        return ()

    def drift(self, current, memory):
        return -self.b * np.asarray(current, dtype=float)

    def lipschitz_bound(self, endpoint_bound, rate):
        return 0.0

    def dissipativity_constants(self):
        return (0.0, self.b)

    def growth_constant(self):
        return self.b

    @property
    def declared_conditions(self):
        return {Condition.LIPSCHITZ: GLOBAL, Condition.DISSIPATIVITY: GLOBAL, Condition.GROWTH: GLOBAL}

    def to_dict(self):
        return {"family": self.name, "b": self.b}


@dataclass(frozen=True)
class ModulatedDamping(DriftFamily):
    """a(x_-) = -b (1 + eps tanh M) x_-(0), M = lambda <u, int e^{lambda s} x_-(s) ds>.

    The damping factor stays in (1 - eps, 1 + eps), which gives dissipativity
    and linear growth globally; the memory Lipschitz constant scales with
    |x_-(0)| and is only finite on bounded endpoints.
    """
    b: float
    epsilon: float
    rate: float
    direction: Optional[Tuple[float, ...]] = None
    name: ClassVar[str] = FamilyName.MODULATED_DAMPING

    def __post_init__(self):
        _positive("b", self.b)
        _positive("lambda", self.rate)
        if not 0.0 <= self.epsilon < 1.0:
            raise DriftError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.direction is not None:
            norm = float(np.linalg.norm(self.direction))
            if not math.isclose(norm, 1.0, rel_tol=1e-9):
                raise DriftError(f"direction must be a unit vector, |u| = {norm}")

    def validate(self, dimension):
        _unit_direction(self.direction, dimension)

    def kernels(self):
        return (KernelKey(self.rate, Transform.IDENTITY),)

    def modulation(self, memory: Mapping[KernelKey, np.ndarray]) -> np.ndarray:
        k_id = np.asarray(memory[self.kernels()[0]], dtype=float)
        u = _unit_direction(self.direction, k_id.shape[-1])
        return self.rate * np.sum(k_id * u, axis=-1)

    def drift(self, current, memory):
        current = np.asarray(current, dtype=float)
        factor = 1.0 + self.epsilon * np.tanh(self.modulation(memory))
        return -self.b * np.expand_dims(factor, -1) * current

    def lipschitz_bound(self, endpoint_bound, rate):
        if rate > self.rate:
            return None
        return self.b * self.epsilon * self.rate * endpoint_bound

    def dissipativity_constants(self):
        return (0.0, self.b * (1.0 - self.epsilon))

    def growth_constant(self):
        return self.b * (1.0 + self.epsilon)

    @property
    def declared_conditions(self):
        return {Condition.LIPSCHITZ: BOUNDED_ENDPOINT, Condition.DISSIPATIVITY: GLOBAL,
                Condition.GROWTH: GLOBAL}

    def to_dict(self):
        data = {"family": self.name, "b": self.b, "epsilon": self.epsilon, "lambda": self.rate}
        if self.direction is not None:
            data["direction"] = list(self.direction)
        return data


@dataclass(frozen=True)
class LinearDistributedDelay(DriftFamily):
    """a(x_-) = -b x_-(0) + kappa lambda int e^{lambda s} x_-(s) ds.

    Negative control: the memory term survives at x_-(0) = 0, so neither
    dissipativity nor linear growth can hold.
    """
    b: float
    kappa: float
    rate: float
    name: ClassVar[str] = FamilyName.LINEAR_DISTRIBUTED_DELAY

    def __post_init__(self):
        _positive("b", self.b)
        _positive("lambda", self.rate)
        if not math.isfinite(self.kappa):
            raise DriftError("kappa must be finite")

    def kernels(self):
        return (KernelKey(self.rate, Transform.IDENTITY),)

    def drift(self, current, memory):
        k_id = np.asarray(memory[self.kernels()[0]], dtype=float)
        return -self.b * np.asarray(current, dtype=float) + self.kappa * self.rate * k_id

    def lipschitz_bound(self, endpoint_bound, rate):
        if rate > self.rate:
            return None
        return abs(self.kappa) * self.rate

    def dissipativity_constants(self):
        return None

    def growth_constant(self):
        return None

    @property
    def declared_conditions(self):
        return {Condition.LIPSCHITZ: GLOBAL, Condition.DISSIPATIVITY: VIOLATED, Condition.GROWTH: VIOLATED}

    def to_dict(self):
        return {"family": self.name, "b": self.b, "kappa": self.kappa, "lambda": self.rate}


@dataclass(frozen=True)
class Composite(DriftFamily):
    """Sum of families; the empty composite is the zero drift."""
    parts: Tuple[DriftFamily, ...] = field(default_factory=tuple)
    name: ClassVar[str] = FamilyName.COMPOSITE

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))

    def validate(self, dimension):
        for part in self.parts:
            part.validate(dimension)

    def kernels(self):
        return tuple(dict.fromkeys(k for part in self.parts for k in part.kernels()))

    def drift(self, current, memory):
        total = np.zeros_like(np.asarray(current, dtype=float))
        for part in self.parts:
            total = total + part.drift(current, memory)
        return total

    def lipschitz_bound(self, endpoint_bound, rate):
        total = 0.0
        for part in self.parts:
            k = part.lipschitz_bound(endpoint_bound, rate)
            if k is None:
                return None
            total += k
        return total

    def dissipativity_constants(self):
        if not self.parts:
            return None
        c1 = c2 = 0.0
        for part in self.parts:
            constants = part.dissipativity_constants()
            if constants is None:
                return None
            c1 += constants[0]
            c2 += constants[1]
        return (c1, c2)

    def growth_constant(self):
        total = 0.0
        for part in self.parts:
            c3 = part.growth_constant()
            if c3 is None:
                return None
            total += c3
        return total

    @property
    def declared_conditions(self):
        declared = {Condition.LIPSCHITZ: GLOBAL, Condition.DISSIPATIVITY: GLOBAL, Condition.GROWTH: GLOBAL}
        if self.dissipativity_constants() is None:
            declared[Condition.DISSIPATIVITY] = VIOLATED
        for part in self.parts:
            for cond, domain in part.declared_conditions.items():
                if domain == VIOLATED:
                    declared[cond] = VIOLATED
                elif domain == BOUNDED_ENDPOINT and declared[cond] == GLOBAL:
                    declared[cond] = BOUNDED_ENDPOINT
        return declared

    def to_dict(self):
        return {"family": self.name, "parts": [p.to_dict() for p in self.parts]}


def family_from_dict(data: Mapping) -> DriftFamily:
    """Build a family from its tagged dict (config ``[drift]`` or JSON sidecar)."""
    tag = data.get("family")
    try:
        if tag == FamilyName.OU:
            return OrnsteinUhlenbeck(b=float(data["b"]))
        if tag == FamilyName.MODULATED_DAMPING:
            direction = data.get("direction")
            return ModulatedDamping(b=float(data["b"]), epsilon=float(data["epsilon"]),
                                    rate=float(data["lambda"]),
                                    direction=tuple(float(v) for v in direction) if direction else None)
        if tag == FamilyName.LINEAR_DISTRIBUTED_DELAY:
            return LinearDistributedDelay(b=float(data["b"]), kappa=float(data["kappa"]),
                                          rate=float(data["lambda"]))
        if tag == FamilyName.COMPOSITE:
            return Composite(tuple(family_from_dict(p) for p in data.get("parts", [])))
    except KeyError as e:
        raise DriftError(f"Drift family {tag!r} is missing parameter {e.args[0]!r}") from e
    raise DriftError(f"Unknown drift family: {tag!r}")


@dataclass(frozen=True)
class DriftSpec:
    """A drift family bound to a state dimension."""
    family: DriftFamily
    dimension: int = 1

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise DriftError(f"dimension must be a positive integer, got {self.dimension}")
        self.family.validate(self.dimension)

    @property
    def kernels(self) -> Tuple[KernelKey, ...]:
        return self.family.kernels()

    @property
    def spec_id(self) -> str:
        parts = [f"{k}={v}" for k, v in sorted(self.family.to_dict().items()) if k != "parts"]
        if isinstance(self.family, Composite):
            parts.append("parts=[" + ",".join(DriftSpec(p, self.dimension).spec_id for p in self.family.parts) + "]")
        return f"d={self.dimension};" + ";".join(parts)

    def to_dict(self):
        return {"dimension": self.dimension, **self.family.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "DriftSpec":
        return cls(family_from_dict(data), int(data.get("dimension", 1)))


def memory_of(spec: DriftSpec, h: PastHistory) -> Dict[KernelKey, np.ndarray]:
    memory = {}
    for key in spec.kernels:
        if not h.has_kernel(key.rate, key.transform):
            raise DriftError(f"History has no accumulator for rate={key.rate}, transform={key.transform!r}")
        memory[key] = h.kernel_integral(key.rate, key.transform)
    return memory


def evaluate(spec: DriftSpec, h: PastHistory) -> np.ndarray:
    """a(h) for one history."""
    if h.dimension != spec.dimension:
        raise DriftError(f"History has dimension {h.dimension}, drift expects {spec.dimension}")
    return spec.family.drift(h.current, memory_of(spec, h))


def evaluate_samples(spec: DriftSpec, samples: np.ndarray, grid_step: float,
                     tail=None) -> np.ndarray:
    """a(x_-) for a raw sampled past, building a throwaway history."""
    h = PastHistory(grid_step, samples, spec.kernels, tail_model=tail)
    return evaluate(spec, h)
