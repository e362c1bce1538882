import numpy as np
import pytest

from src.errors import HistoryError, IntegrationError, ParameterError
from src.backend.integrator import (EnsembleOptions, replay_residual, run_ensemble, simulate,
                                    simulate_ensemble, step, step_count, strong_order)
from src.backend.noise import NOISE_BLOCK_STEPS, NoiseStream, aggregate_increments, keyed_generator
from src.models.drift import DriftSpec, LinearDistributedDelay, ModulatedDamping, OrnsteinUhlenbeck
from src.models.history import PastHistory, shift, splice

from conftest import past_pair


# --- noise ---

def test_same_step_gives_same_increment():
    a = NoiseStream(42, 2, 0.01, trajectory_index=3)
    b = NoiseStream(42, 2, 0.01, trajectory_index=3)
    np.testing.assert_array_equal(a.increments(0, 2000)[1500], b.increments(1500, 1501)[0])
    np.testing.assert_array_equal(a.increments(NOISE_BLOCK_STEPS - 1, NOISE_BLOCK_STEPS + 1),
                                  b.increments(0, 2 * NOISE_BLOCK_STEPS)[NOISE_BLOCK_STEPS - 1:NOISE_BLOCK_STEPS + 1])


def test_streams_are_keyed_by_seed_and_index():
    base = NoiseStream(1, 1, 0.01, 0).increments(0, 10)
    assert not np.array_equal(base, NoiseStream(2, 1, 0.01, 0).increments(0, 10))
    assert not np.array_equal(base, NoiseStream(1, 1, 0.01, 1).increments(0, 10))


def test_lanes_are_independent():
    u = keyed_generator(5, 0, lane=0).standard_normal(4)
    v = keyed_generator(5, 0, lane=1).standard_normal(4)
    assert not np.array_equal(u, v)


def test_increment_moments():
    dt = 0.01
    dw = NoiseStream(2024, 1, dt).increments(0, 10 ** 6)[:, 0]
    assert abs(dw.mean()) <= 4e-3 * np.sqrt(dt)
    assert dw.var() == pytest.approx(dt, rel=0.01)


def test_aggregate_increments_sums_fine_steps():
    fine = NoiseStream(3, 2, 0.001).increments(0, 40)
    coarse = aggregate_increments(fine, 4)
    assert coarse.shape == (10, 2)
    np.testing.assert_allclose(coarse[2], fine[8:12].sum(axis=0), rtol=1e-12, atol=1e-15)
    with pytest.raises(ParameterError):
        aggregate_increments(fine, 3)


# --- single steps and trajectories ---

def test_step_arithmetic():
    h = PastHistory.constant(1.0, 0.01, 0.0)
    nxt = step(h, DriftSpec(OrnsteinUhlenbeck(1.0)), np.zeros(1), 0.01)
    assert nxt.current[0] == pytest.approx(0.99, abs=1e-15)


def test_zero_drift_path_is_the_wiener_path(zero_drift):
    h = PastHistory.zeros(1, 0.01, 0.0)
    traj = simulate(zero_drift, h, 5.0, 0.01, seed=9)
    np.testing.assert_array_equal(traj.x_values - traj.x_values[0], traj.w_values)
    assert traj.w_values[0, 0] == 0.0


def test_simulate_is_deterministic(md_spec):
    h = PastHistory.zeros(1, 0.01, 2.0, md_spec.kernels)
    a = simulate(md_spec, h, 3.0, 0.01, seed=17)
    b = simulate(md_spec, h, 3.0, 0.01, seed=17)
    np.testing.assert_array_equal(a.x_values, b.x_values)
    np.testing.assert_array_equal(a.w_values, b.w_values)
    assert a.initial_history_id == b.initial_history_id


def test_replay_reproduces_trajectory_bit_for_bit(md_spec, pasts):
    _, y_past = pasts(md_spec)
    traj = simulate(md_spec, y_past, 3.0, 0.01, seed=5, trajectory_index=2)
    assert replay_residual(traj, md_spec, y_past) == 0.0
    assert replay_residual(traj, md_spec, y_past, regenerate_noise=False) < 1e-12


def test_replay_detects_a_foreign_trajectory(md_spec):
    h = PastHistory.zeros(1, 0.01, 1.0, md_spec.kernels)
    traj = simulate(md_spec, h, 1.0, 0.01, seed=5)
    other = DriftSpec(ModulatedDamping(2.0, 0.5, 1.0))
    assert replay_residual(traj, other, h) > 0.0


def test_shifted_run_continues_from_its_own_history(md_spec):
    dt, s = 0.01, 1.5
    past = PastHistory.zeros(1, dt, 1.0, md_spec.kernels)
    traj = simulate(md_spec, past, 4.0, dt, seed=9)
    shifted = shift(splice(past, traj), -s)
    k = traj.node(s)
    i0 = shifted.index_of(0.0)
    assert i0 == len(past) - 1 + k
    np.testing.assert_array_equal(shifted.w[i0:], traj.w_values[k:] - traj.w_values[k])

    dws = NoiseStream(9, 1, dt).increments(0, traj.n_steps)
    state = past
    for dw in dws[:k]:
        state = step(state, md_spec, dw, dt)
    np.testing.assert_array_equal(shifted.x[i0 - len(state) + 1:i0 + 1], state.window)
    for j in range(k, traj.n_steps):
        state = step(state, md_spec, dws[j], dt)
        np.testing.assert_array_equal(state.current, shifted.x[i0 + j - k + 1])


def test_ensemble_rows_equal_single_runs(md_spec):
    h = PastHistory.zeros(1, 0.01, 1.0, md_spec.kernels)
    ensemble = simulate_ensemble(md_spec, h, 5, 2.0, 0.01, seed=8, first_index=10)
    for i, traj in enumerate(ensemble):
        single = simulate(md_spec, h, 2.0, 0.01, seed=8, trajectory_index=10 + i)
        np.testing.assert_array_equal(traj.x_values, single.x_values)
        assert traj.trajectory_index == 10 + i


def test_ensemble_does_not_depend_on_threads(ldd_spec):
    h = PastHistory.zeros(1, 0.02, 0.0, ldd_spec.kernels)
    one = run_ensemble(ldd_spec, h, 600, 2.0, seed=4, threads=1)
    many = run_ensemble(ldd_spec, h, 600, 2.0, seed=4, threads=4)
    np.testing.assert_array_equal(one.terminal, many.terminal)


def test_stopping_time_is_first_crossing(ou_spec):
    h = PastHistory.zeros(1, 0.01, 0.0)
    traj = simulate(ou_spec, h, 10.0, 0.01, seed=1, r=0.5)
    assert traj.tau_r_hit is not None
    k, r = traj.tau_r_hit
    norms = np.abs(traj.x_values[:, 0])
    assert norms[k] >= r
    assert np.all(norms[:k] < r)
    assert traj.sidecar()["tau_r_hit"]["time"] == pytest.approx(k * 0.01)


def test_blow_up_reports_last_finite_node():
    spec = DriftSpec(LinearDistributedDelay(b=1.0, kappa=50.0, rate=1.0))
    h = PastHistory.constant(1.0, 0.01, 1.0, spec.kernels)
    with pytest.raises(IntegrationError) as info:
        simulate(spec, h, 20.0, 0.01, seed=0)
    assert 0 < info.value.last_finite_index < 2000
    assert info.value.trajectory_index == 0


def test_grid_mismatch_and_bad_horizon_are_rejected(ou_spec):
    h = PastHistory.zeros(1, 0.01, 0.0)
    with pytest.raises(HistoryError):
        simulate(ou_spec, h, 1.0, 0.02, seed=0)
    with pytest.raises(ParameterError):
        step_count(1.005, 0.01)


def test_capture_memory_records_lambda_times_kernel(ldd_spec):
    h = PastHistory.constant(1.0, 0.01, 20.0, ldd_spec.kernels)
    nodes = np.zeros((3, 1), dtype=np.int64)
    run = run_ensemble(ldd_spec, h, 3, 1.0, seed=0, options=EnsembleOptions(capture_nodes=nodes,
                                                                           capture_memory=True))
    np.testing.assert_allclose(run.captured_memory[:, 0, 0], 1.0 * h.kernel_integral(1.0)[0], rtol=1e-14)
    np.testing.assert_array_equal(run.captured[:, 0, 0], 1.0)


def test_shadow_past_density_matches_single_path(md_spec, pasts):
    from src.backend.girsanov import drift_discrepancy, rn_density
    x_past, y_past = pasts(md_spec)
    run = run_ensemble(md_spec, x_past, 1, 2.0, seed=6, options=EnsembleOptions(shadow_past=y_past))
    traj = simulate(md_spec, x_past, 2.0, 0.01, seed=6)
    profile = drift_discrepancy(traj, x_past, y_past, md_spec, 0.1, 0.5)
    report = rn_density(traj, profile)
    assert run.log_density[0] == pytest.approx(report.log_rn_density, rel=1e-10, abs=1e-14)


@pytest.mark.slow
@pytest.mark.parametrize("family", [OrnsteinUhlenbeck(1.0), ModulatedDamping(1.0, 0.5, 1.0)])
def test_strong_order_is_one(family):
    result = strong_order(DriftSpec(family), 1.0, [0.04, 0.02, 0.01], seed=12, n_paths=200, threads=2)
    assert 0.8 <= result.slope <= 1.2
    assert result.errors == sorted(result.errors, reverse=True)
