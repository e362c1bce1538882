import math

import numpy as np
import pytest

from src.errors import HistoryError, ParameterError
from src.backend.conditions import PathSampler
from src.backend.girsanov import (DiscrepancyProfile, WindowFunctional, bound_constant,
                                  bound_constant_quadrature, couple, drift_discrepancy,
                                  estimate_realized_lipschitz, girsanov_report,
                                  log_density, novikov, rn_density, rn_density_ensemble, running_average,
                                  verify_dual_accumulators)
from src.backend.integrator import simulate
from src.models.drift import (Composite, DriftSpec, LinearDistributedDelay, ModulatedDamping,
                              OrnsteinUhlenbeck)
from src.models.history import PastHistory
from src.models.trajectory import Trajectory

from conftest import DT, K_PRIME, RATE_PRIME, past_pair


def _profile(values, dt, L, rate=1.0):
    times = np.arange(values.size) * dt
    return DiscrepancyProfile(times, values, values[:, None], K=L * (rate - RATE_PRIME) / K_PRIME,
                              k_prime=K_PRIME, rate=rate, rate_prime=RATE_PRIME, L=L)


# --- bound constant ---

def test_bound_constant_closed_form_and_quadrature():
    assert bound_constant(0.5, 0.1, 1.0, 0.5) == pytest.approx(0.1)
    assert bound_constant_quadrature(0.5, 0.1, 1.0, 0.5) == pytest.approx(0.1, rel=1e-8)
    assert bound_constant_quadrature(2.0, 0.3, 3.0, 1.0) == pytest.approx(bound_constant(2.0, 0.3, 3.0, 1.0),
                                                                           rel=1e-8)


def test_bound_constant_needs_faster_memory_than_separation():
    with pytest.raises(ParameterError):
        bound_constant(1.0, 0.1, 0.5, 0.5)
    with pytest.raises(ParameterError):
        bound_constant_quadrature(1.0, 0.1, 0.5, 0.7)


# --- Novikov integral and density ---

def test_novikov_of_a_saturating_profile():
    dt = 1e-3
    t = np.arange(10001) * dt
    report = novikov(_profile(2.0 * np.exp(-t), dt, L=2.0))
    # 1/2 int_0^inf 4 e^{-2t} dt
    assert report.novikov_integral == pytest.approx(1.0, rel=1e-5)
    assert report.novikov_bound == pytest.approx(1.0)
    assert report.tail_bound == pytest.approx(math.exp(-20.0))
    assert report.profile.max_bound_ratio() == pytest.approx(1.0)


def test_novikov_of_a_zero_profile():
    report = novikov(_profile(np.zeros(101), 0.01, L=1.0))
    assert report.truncated_integral == 0.0
    assert report.profile.max_bound_ratio() == 0.0
    assert report.finite
    assert report.within_bound


def test_novikov_respects_a_shorter_horizon():
    dt = 1e-3
    t = np.arange(10001) * dt
    report = novikov(_profile(2.0 * np.exp(-t), dt, L=2.0), horizon=1.0)
    assert report.horizon == 1.0
    assert report.truncated_integral == pytest.approx(1.0 - math.exp(-2.0), rel=1e-5)


def test_log_density_formula():
    signed = np.array([[1.0], [2.0]])
    dw = np.array([[0.5], [-0.5]])
    assert log_density(signed, dw, 0.1) == pytest.approx(0.5 - 1.0 - 0.5 * 5.0 * 0.1)
    with pytest.raises(ParameterError):
        log_density(signed, dw[:1], 0.1)


def test_memoryless_drift_has_unit_density(ou_spec, pasts):
    x_past, y_past = pasts(ou_spec)
    traj = simulate(ou_spec, x_past, 2.0, DT, seed=3)
    report = girsanov_report(traj, x_past, y_past, ou_spec, K_PRIME, RATE_PRIME)
    assert report.rn_density == 1.0
    assert report.log_rn_density == 0.0
    assert report.profile.L == 0.0


def test_density_rejects_profile_of_another_length(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    traj = simulate(md_spec, x_past, 1.0, DT, seed=3)
    profile = drift_discrepancy(traj, x_past, y_past, md_spec, K_PRIME, RATE_PRIME)
    with pytest.raises(ParameterError):
        rn_density(traj, profile, increments=traj.increments[:-1])


# --- drift discrepancy along spliced paths ---

def test_modulated_damping_discrepancy_stays_below_bound(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    traj = simulate(md_spec, x_past, 20.0, DT, seed=11)
    report = girsanov_report(traj, x_past, y_past, md_spec, K_PRIME, RATE_PRIME)
    profile = report.profile
    assert profile.max_bound_ratio() <= 1.01
    assert report.truncated_integral <= profile.L ** 2 / (4.0 * profile.rate) + 1e-6
    assert report.within_bound
    assert math.isfinite(report.rn_density)
    assert report.extra["bound_constant_quadrature"] == pytest.approx(profile.L, rel=1e-6)


def test_discrepancy_decays_for_linear_distributed_delay(ldd_spec, pasts):
    x_past, y_past = pasts(ldd_spec)
    traj = simulate(ldd_spec, x_past, 10.0, DT, seed=2)
    profile = drift_discrepancy(traj, x_past, y_past, ldd_spec, K_PRIME, RATE_PRIME)
    # kappa int e^{s} y(s) ds at t = 0 with y = 0.1 (e^{0.5|s|} - 1)
    assert profile.values[0] == pytest.approx(0.3 * 0.1, rel=1e-3)
    assert profile.max_bound_ratio() <= 1.01
    assert profile.values[-1] < 1e-4 * profile.values[0]
    rows = profile.dat_rows()
    assert len(rows) == traj.n_steps + 1
    assert rows[0][2] == pytest.approx(profile.L)


ESTIMATE_SAMPLER = PathSampler(window=10.0, grid_step=0.02, n_pairs=300)


def test_realized_lipschitz_estimate_tightens_the_bound(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    traj = simulate(md_spec, x_past, 5.0, DT, seed=11)
    estimate = estimate_realized_lipschitz(traj, md_spec, ESTIMATE_SAMPLER, seed=2)
    assert estimate.endpoint_bound == pytest.approx(float(np.max(np.abs(traj.x_values))))
    profile = drift_discrepancy(traj, x_past, y_past, md_spec, K_PRIME, RATE_PRIME)
    assert 0.0 < estimate.K_hat <= profile.K * (1.0 + 1e-9)
    tight = profile.with_constant(estimate.K_hat)
    assert tight.L == pytest.approx(bound_constant(estimate.K_hat, K_PRIME, 1.0, RATE_PRIME))
    np.testing.assert_array_equal(tight.values, profile.values)
    assert tight.max_bound_ratio() >= profile.max_bound_ratio()


def test_realized_lipschitz_estimate_is_exact_for_linear_delay(ldd_spec, pasts):
    x_past, y_past = pasts(ldd_spec)
    traj = simulate(ldd_spec, x_past, 5.0, DT, seed=2)
    estimate = estimate_realized_lipschitz(traj, ldd_spec, ESTIMATE_SAMPLER, seed=3)
    assert estimate.K_hat == pytest.approx(0.3, rel=1e-9)
    profile = drift_discrepancy(traj, x_past, y_past, ldd_spec, K_PRIME, RATE_PRIME, K=estimate.K_hat)
    assert profile.L == pytest.approx(0.3 * K_PRIME / (1.0 - RATE_PRIME))
    assert profile.max_bound_ratio() <= 1.01


def test_discrepancy_needs_shared_endpoint(md_spec):
    x_past = PastHistory.zeros(1, DT, 1.0, md_spec.kernels)
    y_past = PastHistory.constant(1.0, DT, 1.0, md_spec.kernels)
    traj = simulate(md_spec, x_past, 1.0, DT, seed=0)
    with pytest.raises(HistoryError):
        drift_discrepancy(traj, x_past, y_past, md_spec, K_PRIME, RATE_PRIME)


def test_discrepancy_needs_trajectory_from_x_past(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    traj = Trajectory.from_path(np.ones(101), DT)
    with pytest.raises(HistoryError):
        drift_discrepancy(traj, x_past, y_past, md_spec, K_PRIME, RATE_PRIME)


@pytest.mark.parametrize("spec", [
    DriftSpec(ModulatedDamping(1.0, 0.5, 1.0)),
    DriftSpec(LinearDistributedDelay(1.0, 0.3, 1.0)),
    DriftSpec(Composite((ModulatedDamping(1.0, 0.5, 1.0), LinearDistributedDelay(1.0, 0.2, 2.0)))),
])
def test_dual_accumulators_match_quadrature(spec):
    x_past, y_past = past_pair(spec)
    traj = simulate(spec, x_past, 3.0, DT, seed=4)
    check = verify_dual_accumulators(traj, x_past, y_past, spec, every=50)
    assert check["passed"]
    assert check["max_deviation"] < 1e-9


# --- density ensembles ---

def test_density_mean_is_one(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    result = rn_density_ensemble(md_spec, x_past, y_past, 500, 2.0, seed=14, threads=2)
    assert result["all_finite"]
    assert result["min_density"] > 0.0
    assert abs(result["mean"] - 1.0) <= 3.0 * result["standard_error"]


@pytest.mark.slow
def test_density_is_a_martingale_over_a_large_ensemble(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    result = rn_density_ensemble(md_spec, x_past, y_past, 10_000, 5.0, seed=15, threads=4)
    assert abs(result["mean"] - 1.0) <= 3.0 * result["standard_error"]


# --- coupling ---

def test_window_functional_values():
    t = np.arange(101) * 0.01
    f = WindowFunctional(window=0.5, bound=10.0)
    np.testing.assert_allclose(f.values(Trajectory.from_path(t, 0.01)), t[:51] + 0.25, atol=1e-12)
    clamped = f.values(Trajectory.from_path(np.full(101, 20.0), 0.01))
    assert clamped.shape == (51,)
    assert np.all(clamped == 10.0)


def test_window_functional_errors():
    with pytest.raises(ParameterError):
        WindowFunctional(window=0.0)
    with pytest.raises(ParameterError):
        WindowFunctional(window=2.0).values(Trajectory.from_path(np.zeros(101), 0.01))


def test_running_average():
    np.testing.assert_allclose(running_average(np.array([1.0, 2.0, 3.0])), [1.0, 1.5, 2.0])


def test_ou_coupling_contracts_geometrically():
    spec = DriftSpec(OrnsteinUhlenbeck(1.0))
    past1 = PastHistory.constant(1.0, DT, 0.0)
    past2 = PastHistory.zeros(1, DT, 0.0)
    report = couple(spec, past1, past2, 1.0, DT, seed=3, functional=WindowFunctional(window=0.5))
    k = np.arange(101)
    np.testing.assert_allclose(report.discrepancy, (1.0 - DT) ** k, rtol=1e-12)
    assert report.average_times.size == 51
    rows = report.dat_rows()
    assert len(rows) == 101
    assert math.isnan(rows[-1][2])
    assert report.to_dict()["final_discrepancy"] == pytest.approx((1.0 - DT) ** 100, rel=1e-12)


def test_coupling_from_identical_pasts_is_exact(md_spec):
    past = PastHistory.constant(0.5, DT, 5.0, md_spec.kernels)
    report = couple(md_spec, past, past, 2.0, DT, seed=1)
    assert np.all(report.discrepancy == 0.0)
    assert np.all(report.gap == 0.0)


def test_coupling_is_symmetric_in_the_pasts(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    forward = couple(md_spec, x_past, y_past, 3.0, DT, seed=6)
    backward = couple(md_spec, y_past, x_past, 3.0, DT, seed=6)
    np.testing.assert_array_equal(forward.discrepancy, backward.discrepancy)
    np.testing.assert_array_equal(forward.average_1, backward.average_2)
    np.testing.assert_array_equal(forward.average_2, backward.average_1)
    np.testing.assert_array_equal(forward.gap, backward.gap)
    for a, b in zip(forward.trajectories, reversed(backward.trajectories)):
        np.testing.assert_array_equal(a.x_values, b.x_values)


def test_coupling_needs_common_grid(md_spec):
    with pytest.raises(HistoryError):
        couple(md_spec, PastHistory.zeros(1, 0.01, 1.0, md_spec.kernels),
               PastHistory.zeros(1, 0.02, 1.0, md_spec.kernels), 1.0, 0.01, seed=0)


@pytest.mark.slow
def test_coupled_averages_agree_in_the_long_run(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    report = couple(md_spec, x_past, y_past, 500.0, DT, seed=8)
    assert report.gap[-1] <= 0.2


@pytest.mark.slow
def test_coupled_gap_is_within_independent_spread(md_spec, pasts):
    x_past, y_past = pasts(md_spec)
    functional = WindowFunctional()
    report = couple(md_spec, x_past, y_past, 500.0, DT, seed=8, functional=functional)
    finals = [running_average(functional.values(simulate(md_spec, x_past, 500.0, DT, seed=100 + i)))[-1]
              for i in range(8)]
    assert report.gap[-1] <= 2.0 * np.std(finals, ddof=1)
