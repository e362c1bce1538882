"""Seeded realizations of (X, W) on a uniform grid starting at t = 0."""
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from src.errors import HistoryError
from src.models.drift import DriftSpec
from src.models.history import PathRecord, PastHistory, splice


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One path: x_values and w_values have shape (N + 1, d), w_values[0] = 0.

    ``tau_r_hit`` is (node index, r) for the first node with |X| >= r, or None.
    """
    grid_step: float
    x_values: np.ndarray
    w_values: np.ndarray
    seed: int = 0
    trajectory_index: int = 0
    tau_r_hit: Optional[Tuple[int, float]] = None
    stopping_radius: Optional[float] = None
    drift_spec: Optional[DriftSpec] = None
    initial_history_id: str = ""

    def __post_init__(self):
        if self.x_values.shape != self.w_values.shape or self.x_values.ndim != 2:
            raise HistoryError(f"x/w shapes disagree: {self.x_values.shape} vs {self.w_values.shape}")

    @classmethod
    def from_path(cls, x_values, grid_step: float, w_values=None, **meta) -> "Trajectory":
        """Wrap an externally produced path (tests, diagnostics on given data)."""
        x = np.asarray(x_values, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        w = np.zeros_like(x) if w_values is None else np.asarray(w_values, dtype=float).reshape(x.shape)
        return cls(float(grid_step), x, w, **meta)

    @property
    def n_steps(self) -> int:
        return self.x_values.shape[0] - 1

    @property
    def dimension(self) -> int:
        return self.x_values.shape[1]

    @property
    def horizon(self) -> float:
        return self.n_steps * self.grid_step

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.grid_step

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.w_values, axis=0)

    def node(self, t: float) -> int:
        k = int(round(t / self.grid_step))
        if abs(t / self.grid_step - k) > 1e-9 or not 0 <= k <= self.n_steps:
            raise HistoryError(f"t={t} is not a node of this trajectory")
        return k

    def to_record(self, past: Optional[PastHistory] = None) -> PathRecord:
        """Path record on [0, T], or spliced behind ``past`` when given."""
        if past is not None:
            return splice(past, self, mode="coupling")
        return PathRecord(self.grid_step, 0, self.x_values, self.w_values, anchor=0)

    def to_csv_text(self) -> str:
        return self.to_record().to_csv_text()

    def sidecar(self) -> dict:
        return {
            "seed": self.seed,
            "trajectory_index": self.trajectory_index,
            "dt": self.grid_step,
            "T": self.horizon,
            "tau_r_hit": None if self.tau_r_hit is None else
            {"index": self.tau_r_hit[0], "time": self.tau_r_hit[0] * self.grid_step, "r": self.tau_r_hit[1]},
            "stopping_radius": self.stopping_radius,
            "drift_spec": None if self.drift_spec is None else self.drift_spec.to_dict(),
            "initial_history_id": self.initial_history_id,
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), sort_keys=True, indent=2)


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """n trajectories on a shared grid: arrays of shape (n, N + 1, d).

    ``tau_r_index`` holds -1 where the stopping radius was never reached.
    ``memory`` is the optional captured memory coordinate per node.
    """
    grid_step: float
    x_values: np.ndarray
    w_values: np.ndarray
    seed: int
    first_index: int = 0
    tau_r_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stopping_radius: Optional[float] = None
    drift_spec: Optional[DriftSpec] = None
    initial_history_id: str = ""

    def __len__(self):
        return self.x_values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.x_values.shape[1] - 1

    @property
    def dimension(self) -> int:
        return self.x_values.shape[2]

    @property
    def horizon(self) -> float:
        return self.n_steps * self.grid_step

    def node(self, t: float) -> int:
        k = int(round(t / self.grid_step))
        if abs(t / self.grid_step - k) > 1e-9 or not 0 <= k <= self.n_steps:
            raise HistoryError(f"t={t} is not a node of this ensemble")
        return k

    def at_time(self, t: float) -> np.ndarray:
        return self.x_values[:, self.node(t), :]

    def __getitem__(self, i: int) -> Trajectory:
        tau = None
        if self.tau_r_index.size and self.tau_r_index[i] >= 0:
            tau = (int(self.tau_r_index[i]), self.stopping_radius)
        return Trajectory(self.grid_step, self.x_values[i], self.w_values[i], seed=self.seed,
                          trajectory_index=self.first_index + i, tau_r_hit=tau,
                          stopping_radius=self.stopping_radius, drift_spec=self.drift_spec,
                          initial_history_id=self.initial_history_id)

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self[i]

    def tau_r_fraction(self) -> float:
        if not self.tau_r_index.size:
            return math.nan
        return float(np.mean(self.tau_r_index >= 0))
