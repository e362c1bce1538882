"""
Euler-Maruyama integration of dX = a(pi_t X) dt + dW from a given past.

The single-path API (``step``, ``simulate``) and the ensemble engine share
the accumulator update and tail functions of ``src.models.history``, so a
trajectory produced by the vectorized engine is reproduced bit for bit by
replaying ``step`` on a PastHistory.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.errors import HistoryError, IntegrationError, ParameterError
from src.backend.noise import NOISE_BLOCK_STEPS, NoiseStream, aggregate_increments
from src.models.drift import DriftSpec, evaluate
from src.models.history import (KernelKey, PastHistory, apply_transform, decay_factor,
                                kernel_step, tail_contribution)
from src.models.trajectory import Trajectory, TrajectoryEnsemble

logger = logging.getLogger("Integrator")

# --- Constants ---
# |X| beyond this (or non-finite) aborts the run.
BLOW_UP_THRESHOLD = 1e12
# Trajectories are integrated in fixed chunks of this size; chunk boundaries
# never depend on the thread count.
ENSEMBLE_CHUNK_SIZE = 256
# Reference step for strong-order studies is min(dts) / this.
DEFAULT_REFINEMENT = 64
GRID_SNAP_TOL = 1e-9


def step_count(T: float, dt: float) -> int:
    if not (T > 0.0 and dt > 0.0):
        raise ParameterError(f"T and dt must be > 0, got T={T}, dt={dt}")
    ratio = T / dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > GRID_SNAP_TOL * max(1.0, ratio):
        raise ParameterError(f"T={T} is not a whole number of steps dt={dt}")
    return n


def step(state: PastHistory, spec: DriftSpec, dW, dt: float) -> PastHistory:
    """One Euler step: X + a(state) dt + dW, pushed onto the history."""
    if not dt > 0.0:
        raise ParameterError(f"dt must be > 0, got {dt}")
    a = evaluate(spec, state)
    if not np.all(np.isfinite(a)):
        raise IntegrationError(f"Non-finite drift {a} after {state.steps} steps",
                               last_finite_index=state.steps)
    return state.push_sample(dt, state.current + a * dt + np.asarray(dW, dtype=float))


@dataclass
class EnsembleOptions:
    """What the engine records besides the terminal state."""
    store_paths: bool = False
    capture_nodes: Optional[np.ndarray] = None   # (n, m) node indices
    capture_memory: bool = False                  # lambda * int e^{lambda s} X(s) ds at captured nodes
    accumulate_energy: bool = False               # dt sum |X_k|^2 and dt^2 sum |a_k|^2 per path
    shadow_past: Optional[PastHistory] = None     # second past for the Girsanov exponent
    stopping_radius: Optional[float] = None


@dataclass
class EnsembleRun:
    terminal: np.ndarray
    tau_r_index: np.ndarray
    x_values: Optional[np.ndarray] = None
    w_values: Optional[np.ndarray] = None
    captured: Optional[np.ndarray] = None
    captured_memory: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None
    drift_energy: Optional[np.ndarray] = None
    log_density: Optional[np.ndarray] = None
    max_abs_discrepancy: Optional[np.ndarray] = None


class _MemoryState:
    """Batched accumulators of one past, advanced with the engine's samples."""

    def __init__(self, history: PastHistory, spec: DriftSpec, count: int):
        self.history = history
        self.keys: List[KernelKey] = []
        self.values: Dict[KernelKey, np.ndarray] = {}
        for key in spec.kernels:
            acc = history.accumulator(key.rate, key.transform)
            self.keys.append(key)
            self.values[key] = np.tile(acc.value, (count, 1))
        self._registered = {key: history.accumulator(key.rate, key.transform) for key in self.keys}
        self._decay = {key: decay_factor(self._registered[key].rate, history.grid_step) for key in self.keys}
        self._half_dt = 0.5 * history.grid_step

    def memory(self, steps_done: int) -> Dict[KernelKey, np.ndarray]:
        h = self.history
        elapsed = (h.steps + steps_done) * h.grid_step
        out = {}
        for key in self.keys:
            acc = self._registered[key]
            out[key] = self.values[key] + tail_contribution(h.tail_model, acc.rate, acc.transform,
                                                            h.tail_span, h.dimension, elapsed)
        return out

    def advance(self, phis: Dict[str, tuple]):
        for key in self.keys:
            prev_phi, new_phi = phis[key.transform]
            self.values[key] = kernel_step(self.values[key], prev_phi, new_phi,
                                           self._decay[key], self._half_dt)


@dataclass
class _Plan:
    spec: DriftSpec
    initial: PastHistory
    n_steps: int
    seed: int
    first_index: int
    options: EnsembleOptions
    increments: Optional[np.ndarray] = None


def _run_chunk(plan: _Plan, lo: int, hi: int) -> EnsembleRun:
    spec, initial, opts = plan.spec, plan.initial, plan.options
    dt = initial.grid_step
    d = initial.dimension
    count = hi - lo
    n_steps = plan.n_steps
    transforms = sorted({k.transform for k in spec.kernels})

    primary = _MemoryState(initial, spec, count)
    shadow = _MemoryState(opts.shadow_past, spec, count) if opts.shadow_past is not None else None

    x = np.tile(initial.current, (count, 1))
    w = np.zeros((count, d))
    tau = np.full(count, -1, dtype=np.int64)
    radius = opts.stopping_radius

    x_out = w_out = None
    if opts.store_paths:
        x_out = np.empty((count, n_steps + 1, d))
        w_out = np.empty((count, n_steps + 1, d))
        x_out[:, 0] = x
        w_out[:, 0] = w

    captured = captured_memory = None
    capture_order = capture_sorted = None
    ptr = 0
    m = 0
    if opts.capture_nodes is not None:
        nodes = np.asarray(opts.capture_nodes[lo:hi], dtype=np.int64)
        m = nodes.shape[1]
        captured = np.empty((count, m, d))
        if opts.capture_memory:
            captured_memory = np.empty((count, m, d))
        flat = nodes.ravel()
        capture_order = np.argsort(flat, kind="stable")
        capture_sorted = flat[capture_order]

    energy = np.zeros(count) if opts.accumulate_energy else None
    drift_energy = np.zeros(count) if opts.accumulate_energy else None
    log_density = np.zeros(count) if shadow is not None else None
    max_disc = np.zeros(count) if shadow is not None else None
    memory_key = spec.kernels[0] if opts.capture_memory and spec.kernels else None
    if opts.capture_memory and memory_key is None:
        raise ParameterError("capture_memory needs a drift with a memory kernel")

    streams = None
    if plan.increments is None:
        streams = [NoiseStream(plan.seed, d, dt, plan.first_index + lo + i) for i in range(count)]
    block_dw = None

    for k in range(n_steps + 1):
        mem = primary.memory(k)
        if radius is not None:
            crossed = (tau < 0) & (np.sqrt(np.sum(x * x, axis=1)) >= radius)
            tau[crossed] = k
        if capture_order is not None:
            end = int(np.searchsorted(capture_sorted, k, side="right"))
            if end > ptr:
                idx = capture_order[ptr:end]
                rows, cols = np.divmod(idx, m)
                captured[rows, cols] = x[rows]
                if captured_memory is not None:
                    captured_memory[rows, cols] = memory_key.rate * mem[memory_key][rows]
                ptr = end
        if k == n_steps:
            break

        if plan.increments is not None:
            dW = plan.increments[lo:hi, k]
        else:
            offset = k % NOISE_BLOCK_STEPS
            if offset == 0:
                k1 = min(k + NOISE_BLOCK_STEPS, n_steps)
                block_dw = np.stack([s.increments(k, k1) for s in streams], axis=0)
            dW = block_dw[:, offset]

        a = spec.family.drift(x, mem)
        if shadow is not None:
            delta = spec.family.drift(x, shadow.memory(k)) - a
            log_density += np.sum(delta * dW, axis=1) - 0.5 * np.sum(delta * delta, axis=1) * dt
            np.maximum(max_disc, np.sqrt(np.sum(delta * delta, axis=1)), out=max_disc)

        x_new = x + a * dt + dW
        peak = np.max(np.abs(x_new))
        if not peak <= BLOW_UP_THRESHOLD:
            bad = np.nonzero(~(np.max(np.abs(x_new), axis=1) <= BLOW_UP_THRESHOLD))[0]
            row = int(bad[0])
            raise IntegrationError(
                f"Trajectory {plan.first_index + lo + row} blew up at step {k + 1} (|X| > {BLOW_UP_THRESHOLD:g})",
                last_finite_index=k, trajectory_index=plan.first_index + lo + row)

        phis = {t: (apply_transform(t, x), apply_transform(t, x_new)) for t in transforms}
        primary.advance(phis)
        if shadow is not None:
            shadow.advance(phis)
        if energy is not None:
            energy += dt * np.sum(x * x, axis=1)
            drift_energy += dt * dt * np.sum(a * a, axis=1)
        w = w + dW
        x = x_new
        if x_out is not None:
            x_out[:, k + 1] = x
            w_out[:, k + 1] = w

    return EnsembleRun(terminal=x, tau_r_index=tau, x_values=x_out, w_values=w_out,
                       captured=captured, captured_memory=captured_memory, energy=energy,
                       drift_energy=drift_energy, log_density=log_density, max_abs_discrepancy=max_disc)


def _merge(parts: Sequence[EnsembleRun]) -> EnsembleRun:
    def cat(name):
        values = [getattr(p, name) for p in parts]
        return None if values[0] is None else np.concatenate(values, axis=0)
    return EnsembleRun(**{name: cat(name) for name in EnsembleRun.__dataclass_fields__})


def resolve_threads(threads: Optional[int]) -> int:
    return max(1, int(threads)) if threads else 1


def run_ensemble(spec: DriftSpec, initial: PastHistory, n: int, T: float, seed: int,
                 options: Optional[EnsembleOptions] = None, threads: Optional[int] = 1,
                 first_index: int = 0, increments: Optional[np.ndarray] = None) -> EnsembleRun:
    """Integrate trajectories first_index .. first_index + n - 1 in fixed chunks.

    Results depend only on the arguments, never on ``threads``.
    """
    if n < 1:
        raise ParameterError(f"Ensemble size must be >= 1, got {n}")
    if initial.dimension != spec.dimension:
        raise HistoryError(f"Initial history has dimension {initial.dimension}, drift expects {spec.dimension}")
    options = options or EnsembleOptions()
    n_steps = step_count(T, initial.grid_step)
    if options.shadow_past is not None:
        shadow = options.shadow_past
        if not math.isclose(shadow.grid_step, initial.grid_step, rel_tol=1e-12):
            raise HistoryError("Shadow past lives on a different grid")
        if not np.array_equal(shadow.current, initial.current):
            raise HistoryError("Shadow past must share the initial endpoint")
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (n, n_steps, spec.dimension):
            raise ParameterError(f"increments must have shape {(n, n_steps, spec.dimension)}, got {increments.shape}")
    if options.capture_nodes is not None:
        nodes = np.asarray(options.capture_nodes)
        if nodes.ndim != 2 or nodes.shape[0] != n or nodes.min() < 0 or nodes.max() > n_steps:
            raise ParameterError("capture_nodes must be an (n, m) array of nodes in [0, N]")

    plan = _Plan(spec, initial, n_steps, int(seed), int(first_index), options, increments)
    bounds = [(lo, min(lo + ENSEMBLE_CHUNK_SIZE, n)) for lo in range(0, n, ENSEMBLE_CHUNK_SIZE)]
    workers = min(resolve_threads(threads), len(bounds))
    logger.debug(f"Ensemble n={n} steps={n_steps} chunks={len(bounds)} workers={workers}")
    if workers == 1:
        parts = [_run_chunk(plan, lo, hi) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="memsde-chunk") as pool:
            parts = list(pool.map(lambda b: _run_chunk(plan, *b), bounds))
    return _merge(parts)


def simulate(spec: DriftSpec, initial: PastHistory, T: float, dt: float, seed: int,
             r: Optional[float] = None, trajectory_index: int = 0,
             increments: Optional[np.ndarray] = None) -> Trajectory:
    """One seeded trajectory on [0, T] started from ``initial``."""
    if not math.isclose(dt, initial.grid_step, rel_tol=1e-12):
        raise HistoryError(f"dt={dt} differs from the history grid {initial.grid_step}")
    if increments is not None:
        increments = np.asarray(increments, dtype=float)[None]
    run = run_ensemble(spec, initial, 1, T, seed,
                       EnsembleOptions(store_paths=True, stopping_radius=r),
                       first_index=trajectory_index, increments=increments)
    tau = int(run.tau_r_index[0])
    return Trajectory(initial.grid_step, run.x_values[0], run.w_values[0], seed=int(seed),
                      trajectory_index=int(trajectory_index),
                      tau_r_hit=(tau, float(r)) if tau >= 0 else None, stopping_radius=r,
                      drift_spec=spec, initial_history_id=initial.fingerprint())


def simulate_ensemble(spec: DriftSpec, initial: PastHistory, n: int, T: float, dt: float,
                      seed: int, r: Optional[float] = None, threads: Optional[int] = 1,
                      first_index: int = 0) -> TrajectoryEnsemble:
    """n stored trajectories; row i equals simulate(..., trajectory_index=first_index + i)."""
    if not math.isclose(dt, initial.grid_step, rel_tol=1e-12):
        raise HistoryError(f"dt={dt} differs from the history grid {initial.grid_step}")
    run = run_ensemble(spec, initial, n, T, seed, EnsembleOptions(store_paths=True, stopping_radius=r),
                       threads=threads, first_index=first_index)
    return TrajectoryEnsemble(initial.grid_step, run.x_values, run.w_values, seed=int(seed),
                              first_index=first_index, tau_r_index=run.tau_r_index, stopping_radius=r,
                              drift_spec=spec, initial_history_id=initial.fingerprint())


def replay_residual(traj: Trajectory, spec: DriftSpec, initial: PastHistory,
                    regenerate_noise: bool = True) -> float:
    """max_k |X_{k+1} - (X_k + a(pi_{t_k} X) dt + dW_k)| from an independent step-by-step pass.

    Noise is regenerated from (seed, trajectory_index) unless told to use the
    stored W increments.
    """
    if not np.array_equal(traj.x_values[0], initial.current):
        raise HistoryError("Trajectory does not start at the given history's endpoint")
    dt = traj.grid_step
    if regenerate_noise:
        dws = NoiseStream(traj.seed, traj.dimension, dt, traj.trajectory_index).increments(0, traj.n_steps)
    else:
        dws = traj.increments
    state = initial
    worst = 0.0
    for k in range(traj.n_steps):
        a = evaluate(spec, state)
        residual = traj.x_values[k + 1] - (traj.x_values[k] + a * dt + dws[k])
        worst = max(worst, float(np.max(np.abs(residual))))
        state = step(state, spec, dws[k], dt)
    return worst


@dataclass
class StrongOrderResult:
    dts: List[float]
    errors: List[float]
    slope: float
    reference_dt: float
    n_paths: int

    def to_dict(self):
        return {"dts": self.dts, "errors": self.errors, "slope": self.slope,
                "reference_dt": self.reference_dt, "n_paths": self.n_paths}


def strong_order(spec: DriftSpec, T: float, dts: Sequence[float], seed: int,
                 past_factory: Optional[Callable[[float], PastHistory]] = None,
                 n_paths: int = 200, refinement: int = DEFAULT_REFINEMENT,
                 threads: Optional[int] = 1) -> StrongOrderResult:
    """Slope of log E|X_dt(T) - X_ref(T)| against log dt, reference at min(dts)/refinement.

    Every coarse run is driven by sums of the reference increments, so all
    runs see the same Brownian path.
    """
    if past_factory is None:
        def past_factory(h):
            return PastHistory.zeros(spec.dimension, h, 0.0, spec.kernels)
    dts = sorted(float(v) for v in dts)
    ref_dt = dts[0] / refinement
    n_ref = step_count(T, ref_dt)
    fine = np.stack([NoiseStream(seed, spec.dimension, ref_dt, i).increments(0, n_ref)
                     for i in range(n_paths)], axis=0)
    reference = run_ensemble(spec, past_factory(ref_dt), n_paths, T, seed, threads=threads,
                             increments=fine).terminal
    errors = []
    for dt in dts:
        factor = int(round(dt / ref_dt))
        coarse = aggregate_increments(fine, factor, axis=1)
        terminal = run_ensemble(spec, past_factory(dt), n_paths, T, seed, threads=threads,
                                increments=coarse).terminal
        errors.append(float(np.mean(np.sqrt(np.sum((terminal - reference) ** 2, axis=1)))))
    slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    logger.info(f"Strong order slope {slope:.3f} over dt={dts}")
    return StrongOrderResult(dts, errors, slope, ref_dt, n_paths)
