"""
Run configuration: TOML text -> validated RunConfig.

Every section is a pydantic model with ``extra="forbid"``, so an unknown key
is an error naming its dotted path. Checks that span several fields (rates
of pasts against the drift's memory rate, past references) run after the
schema and report paths the same way.
"""
import hashlib
import json
import logging
import os
import re
import tempfile
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from src.errors import ConfigError, DriftError, FieldError
from src.models.drift import DriftSpec, FamilyName
from src.models.history import KernelKey, PastHistory, TailModel

logger = logging.getLogger("Settings")

# --- Defaults ---
DEFAULT_OUTPUT_DIRECTORY = "out"
DEFAULT_PAST_WINDOW = 20.0
# Relative slack for "T is a whole number of dt steps".
GRID_SNAP_TOL = 1e-9
REQUIRED_PARAMETERS = {
    FamilyName.OU: ("b",),
    FamilyName.MODULATED_DAMPING: ("b", "epsilon", "lambda"),
    FamilyName.LINEAR_DISTRIBUTED_DELAY: ("b", "kappa", "lambda"),
    FamilyName.COMPOSITE: (),
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DriftSection(_Section):
    family: Literal["ou", "modulated_damping", "linear_distributed_delay", "composite"]
    b: Optional[float] = None
    epsilon: Optional[float] = None
    kappa: Optional[float] = None
    lambda_: Optional[float] = Field(default=None, alias="lambda")
    dimension: int = Field(default=1, ge=1)
    direction: Optional[List[float]] = None
    parts: List["DriftSection"] = Field(default_factory=list)

    def as_dict(self) -> dict:
        return self.model_dump(by_alias=True, exclude_none=True)


class SimSection(_Section):
    T: float = Field(default=10.0, gt=0)
    dt: float = Field(default=0.01, gt=0)
    n: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    stopping_radius: Optional[float] = Field(default=None, gt=0)
    window: float = Field(default=0.0, ge=0)
    mode: Literal["uniform_time", "terminal"] = "uniform_time"


class SamplerSection(_Section):
    window: float = Field(default=20.0, gt=0)
    grid_step: float = Field(default=0.01, gt=0)
    n_pairs: int = Field(default=1000, ge=1)
    endpoint_bound: float = Field(default=1.0, gt=0)
    damping_rate: float = Field(default=0.5, gt=0)
    n_modes: int = Field(default=4, ge=0)
    amplitude: float = Field(default=1.0, ge=0)
    max_frequency: float = Field(default=2.0, ge=0)
    offset_scale: float = Field(default=10.0, ge=0)
    offset_ramp: float = Field(default=5.0, gt=0)
    zero_endpoint_fraction: float = Field(default=0.1, ge=0, le=1)
    aligned_fraction: float = Field(default=0.25, ge=0, le=1)


class ConstantsSection(_Section):
    C1: Optional[float] = Field(default=None, ge=0)
    C2: Optional[float] = Field(default=None, gt=0)
    C3: Optional[float] = Field(default=None, ge=0)


class ChecksSection(_Section):
    z: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    dt_increments: List[float] = Field(default_factory=lambda: [0.05, 0.1])
    delta: float = Field(default=0.1, gt=0)
    delta0: float = Field(default=0.05, gt=0)
    K_window: float = Field(default=4.0, gt=0)
    projections: int = Field(default=64, ge=1)
    rate: Optional[float] = Field(default=None, gt=0)
    bounds: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    c1_budget: float = Field(default=1.0, ge=0)
    kb_horizons: List[float] = Field(default_factory=list)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    constants: ConstantsSection = Field(default_factory=ConstantsSection)


class PastDefinition(_Section):
    """A named analytic past.

    zero: x = 0; constant: x = value;
    exponential: x(s) = amplitude e^{rate |s|} u;
    shifted_exponential: x(s) = value + amplitude (e^{rate |s|} - 1) u (so x(0) = value).
    """
    name: str
    kind: Literal["zero", "constant", "exponential", "shifted_exponential"]
    value: Union[float, List[float]] = 0.0
    amplitude: float = Field(default=0.0, ge=0)
    rate: float = Field(default=0.5, gt=0)

    def build(self, dimension: int, grid_step: float, window_span: float,
              kernels: Tuple[KernelKey, ...]) -> PastHistory:
        value = np.broadcast_to(np.asarray(self.value, dtype=float), (dimension,)).copy()
        u = np.zeros(dimension)
        u[0] = 1.0
        if self.kind == "zero":
            return PastHistory.zeros(dimension, grid_step, window_span, kernels)
        if self.kind == "constant":
            return PastHistory.constant(value, grid_step, window_span, kernels)
        if self.kind == "exponential":
            tail = TailModel.exponential(self.amplitude, self.rate, tuple(u))
        else:
            tail = TailModel(constant=tuple(value - self.amplitude * u), amplitude=self.amplitude,
                             rate=self.rate, direction=tuple(u))
        return PastHistory.from_tail(tail, dimension, grid_step, window_span, kernels)


class GirsanovSection(_Section):
    pasts: List[PastDefinition] = Field(default_factory=list)
    x_past: str = "zero"
    y_past: str = "zero"
    lambda_prime: float = Field(default=0.5, gt=0)
    k_prime: float = Field(default=0.1, ge=0)
    horizon: float = Field(default=20.0, gt=0)
    n_paths: int = Field(default=1000, ge=1)
    density_horizon: float = Field(default=5.0, gt=0)
    window: float = Field(default=DEFAULT_PAST_WINDOW, ge=0)


class CouplingSection(_Section):
    past1: str = "zero"
    past2: str = "zero"
    window: float = Field(default=1.0, gt=0)
    bound: float = Field(default=10.0, gt=0)
    coordinate: int = Field(default=0, ge=0)


class OutputSection(_Section):
    directory: str = DEFAULT_OUTPUT_DIRECTORY
    formats: List[Literal["csv", "json", "dat"]] = Field(default_factory=lambda: ["csv", "json", "dat"])


class RunConfig(_Section):
    drift: DriftSection
    sim: SimSection = Field(default_factory=SimSection)
    checks: ChecksSection = Field(default_factory=ChecksSection)
    girsanov: GirsanovSection = Field(default_factory=GirsanovSection)
    coupling: CouplingSection = Field(default_factory=CouplingSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def drift_spec(self) -> DriftSpec:
        return DriftSpec.from_dict(self.drift.as_dict())

    def past(self, name: str, grid_step: Optional[float] = None, window_span: Optional[float] = None) -> PastHistory:
        spec = self.drift_spec()
        grid_step = self.sim.dt if grid_step is None else grid_step
        window_span = self.girsanov.window if window_span is None else window_span
        if name == "zero" and not any(p.name == "zero" for p in self.girsanov.pasts):
            return PastHistory.zeros(spec.dimension, grid_step, window_span, spec.kernels)
        for definition in self.girsanov.pasts:
            if definition.name == name:
                return definition.build(spec.dimension, grid_step, window_span, spec.kernels)
        raise ConfigError([FieldError("girsanov.pasts", f"no past named {name!r}")])

    def as_dict(self) -> dict:
        return self.model_dump(by_alias=True, exclude_none=True)


DriftSection.model_rebuild()


def _pydantic_errors(exc: ValidationError) -> List[FieldError]:
    errors = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"])
        errors.append(FieldError(path, err["msg"]))
    return errors


def _drift_errors(section: DriftSection, path: str) -> List[FieldError]:
    errors = []
    data = section.as_dict()
    for key in REQUIRED_PARAMETERS[section.family]:
        if key not in data:
            errors.append(FieldError(f"{path}.{key}", f"required for family {section.family!r}"))
    for i, part in enumerate(section.parts):
        if section.family != FamilyName.COMPOSITE:
            errors.append(FieldError(f"{path}.parts", "only a composite drift has parts"))
            break
        errors.extend(_drift_errors(part, f"{path}.parts.{i}"))
    return errors


def _cross_field_errors(config: RunConfig) -> List[FieldError]:
    errors = _drift_errors(config.drift, "drift")
    if errors:
        return errors
    try:
        spec = config.drift_spec()
    except DriftError as e:
        return [FieldError("drift", str(e))]

    memory_rate = spec.family.memory_rate
    reference_rate = memory_rate if memory_rate is not None else 1.0
    if not config.girsanov.lambda_prime < reference_rate:
        errors.append(FieldError("girsanov.lambda_prime",
                                 f"must be below the drift memory rate {reference_rate}"))
    if not config.checks.delta0 < config.checks.delta:
        errors.append(FieldError("checks.delta0", "must be below checks.delta"))
    steps = config.sim.T / config.sim.dt
    if round(steps) < 1 or abs(steps - round(steps)) > GRID_SNAP_TOL * max(1.0, steps):
        errors.append(FieldError("sim.T", f"must be a whole number of sim.dt = {config.sim.dt} steps"))

    names = [p.name for p in config.girsanov.pasts]
    if len(set(names)) != len(names):
        errors.append(FieldError("girsanov.pasts", "past names must be unique"))
    known = set(names) | {"zero"}
    for path, ref in (("girsanov.x_past", config.girsanov.x_past), ("girsanov.y_past", config.girsanov.y_past),
                      ("coupling.past1", config.coupling.past1), ("coupling.past2", config.coupling.past2)):
        if ref not in known:
            errors.append(FieldError(path, f"unknown past {ref!r}"))
    for i, past in enumerate(config.girsanov.pasts):
        if past.kind in ("exponential", "shifted_exponential") and memory_rate is not None \
                and not past.rate < memory_rate:
            errors.append(FieldError(f"girsanov.pasts.{i}.rate",
                                     f"must be below the drift memory rate {memory_rate}"))
        if isinstance(past.value, list) and len(past.value) != spec.dimension:
            errors.append(FieldError(f"girsanov.pasts.{i}.value", f"needs {spec.dimension} coordinates"))
    if config.coupling.coordinate >= spec.dimension:
        errors.append(FieldError("coupling.coordinate", f"must be below dimension {spec.dimension}"))
    return errors


def parse_config(text: str) -> RunConfig:
    """Parse and validate TOML text; raises ConfigError listing every field problem."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r"line (\d+)", str(e))
        line = getattr(e, "lineno", None) or (int(match.group(1)) if match else None)
        raise ConfigError([FieldError("<syntax>", str(e))], line=line) from e
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_pydantic_errors(e)) from e
    errors = _cross_field_errors(config)
    if errors:
        raise ConfigError(errors)
    return config


def serialize_config(config: RunConfig) -> str:
    return tomli_w.dumps(config.as_dict())


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    config = parse_config(text)
    logger.info(f"Loaded config {path} (drift family {config.drift.family})")
    return config


def apply_overrides(config: RunConfig, seed: Optional[int] = None, T: Optional[float] = None,
                    dt: Optional[float] = None, n: Optional[int] = None,
                    directory: Optional[str] = None) -> Tuple[RunConfig, dict]:
    """Command-line overrides win over the file; returns the new config and what changed."""
    sim_updates = {k: v for k, v in (("seed", seed), ("T", T), ("dt", dt), ("n", n)) if v is not None}
    overrides = dict(sim_updates)
    data = config.as_dict()
    data["sim"] = {**data.get("sim", {}), **sim_updates}
    if directory is not None:
        data["output"] = {**data.get("output", {}), "directory": directory}
        overrides["out"] = directory
    try:
        updated = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_pydantic_errors(e)) from e
    errors = _cross_field_errors(updated)
    if errors:
        raise ConfigError(errors)
    return updated, overrides


def atomic_write_text(path: str, text: str):
    """
    Atomic save: write to a temp file in the same directory, then rename.
    os.replace() is atomic on POSIX, so a crash mid-write never leaves a
    truncated artifact behind.
    """
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".memsde_", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except Exception:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def save_config(config: RunConfig, path: str):
    atomic_write_text(path, serialize_config(config))
