import numpy as np
import pytest

from src.errors import EstimationError, ParameterError
from src.backend.integrator import simulate_ensemble
from src.backend.stationary import (EmpiricalMeasure, SamplingMode, Verdict, energy_inequality_check,
                                    energy_sample, growth_diagnostic, increment_bound, increment_samples,
                                    increment_tail_check, increment_tail_check_samples, kb_average,
                                    kb_convergence, lift_covariance, moment_bound_check, moment_limit,
                                    projection_directions, w1_distance, zero_past)
from src.models.drift import DriftSpec, LinearDistributedDelay, OrnsteinUhlenbeck
from src.models.trajectory import Trajectory


# --- empirical measures and W1 ---

def test_measure_rejects_empty_and_non_finite_samples():
    with pytest.raises(EstimationError):
        EmpiricalMeasure(np.zeros((0, 1)))
    with pytest.raises(EstimationError):
        EmpiricalMeasure(np.array([1.0, np.nan]))


def test_measure_csv_carries_memory_columns():
    m = EmpiricalMeasure(np.array([[1.0], [2.0]]), memory=np.array([[0.5], [0.25]]))
    lines = m.to_csv_text().splitlines()
    assert lines[0] == "x_1,m_1"
    assert len(lines) == 3
    assert m.joint_covariance().shape == (2, 2)
    with pytest.raises(EstimationError):
        EmpiricalMeasure(np.ones(3)).joint_covariance()


def test_w1_of_a_translation_in_one_dimension():
    rng = np.random.default_rng(0)
    a = rng.normal(size=500)
    assert w1_distance(EmpiricalMeasure(a), EmpiricalMeasure(a + 1.0)) == pytest.approx(1.0, abs=1e-12)


def test_sliced_w1_of_a_translation():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(400, 2))
    v = np.array([1.0, -0.5])
    dirs = projection_directions(2, 32, seed=3)
    expected = np.mean(np.abs(dirs @ v))
    got = w1_distance(EmpiricalMeasure(a), EmpiricalMeasure(a + v), projections=32, seed=3)
    assert got == pytest.approx(expected, rel=1e-9)


def test_w1_dimension_mismatch():
    with pytest.raises(EstimationError):
        w1_distance(EmpiricalMeasure(np.zeros(3)), EmpiricalMeasure(np.zeros((3, 2))))


# --- Krylov-Bogolyubov sampling ---

def test_uniform_time_sample_of_wiener_path(zero_drift):
    # E W(U)^2 = E U = T / 2
    m = kb_average(zero_drift, 4000, 2.0, 0.01, seed=21)
    assert len(m) == 4000
    assert m.second_moment() == pytest.approx(1.0, abs=0.15)
    assert m.provenance["mode"] == SamplingMode.UNIFORM_TIME


def test_terminal_sample_of_wiener_path(zero_drift):
    m = kb_average(zero_drift, 4000, 2.0, 0.01, seed=22, mode=SamplingMode.TERMINAL)
    assert m.second_moment() == pytest.approx(2.0, rel=0.1)


def test_kb_average_is_independent_of_threads(md_spec):
    one = kb_average(md_spec, 700, 2.0, 0.02, seed=5, threads=1)
    many = kb_average(md_spec, 700, 2.0, 0.02, seed=5, threads=3)
    np.testing.assert_array_equal(one.samples, many.samples)


def test_kb_average_argument_errors(ou_spec):
    with pytest.raises(ParameterError):
        kb_average(ou_spec, 0, 1.0, 0.01, seed=0)
    with pytest.raises(ParameterError):
        kb_average(ou_spec, 10, 1.0, 0.01, seed=0, mode="forward")


def test_zero_past_has_a_single_sample(md_spec):
    h = zero_past(md_spec, 0.01)
    assert len(h) == 1
    assert np.all(h.current == 0.0)


def test_kb_convergence_rows(ou_spec):
    rows = kb_convergence(ou_spec, [2.0, 4.0], 300, 0.05, seed=2, projections=8)
    assert [row["T"] for row in rows] == [2.0, 4.0]
    for row in rows:
        assert row["w1"] >= 0.0
        assert row["noise_floor"] >= 0.0
        assert row["excess"] == pytest.approx(row["w1"] - row["noise_floor"])


@pytest.mark.slow
def test_ou_stationary_second_moment():
    spec = DriftSpec(OrnsteinUhlenbeck(1.0))
    m = kb_average(spec, 2000, 100.0, 0.01, seed=7, threads=4)
    assert m.second_moment() == pytest.approx(0.5, abs=0.05)
    assert moment_bound_check(m, 0.0, 1.0).passed


@pytest.mark.slow
def test_linear_distributed_delay_matches_lift_covariance():
    spec = DriftSpec(LinearDistributedDelay(b=1.0, kappa=0.3, rate=1.0))
    m = kb_average(spec, 4000, 200.0, 0.01, seed=13, capture_memory=True, threads=4)
    np.testing.assert_allclose(m.joint_covariance(), lift_covariance(1.0, 0.3, 1.0), rtol=0.1)


def test_lift_covariance_closed_form():
    sigma = lift_covariance(1.0, 0.3, 1.0)
    q = 0.5 / 1.4
    np.testing.assert_allclose(sigma, [[1.7 * q, q], [q, q]], rtol=1e-10)


def test_unstable_lift_is_rejected():
    with pytest.raises(ParameterError):
        lift_covariance(1.0, 1.5, 1.0)


# --- moment bound ---

def test_moment_limit():
    assert moment_limit(0.0, 1.0) == 0.5
    assert moment_limit(1.0, 0.5, dimension=2) == pytest.approx(4.0)
    with pytest.raises(ParameterError):
        moment_limit(0.0, 0.0)


def test_moment_check_verdicts():
    rng = np.random.default_rng(4)
    inside = EmpiricalMeasure(rng.normal(0.0, np.sqrt(0.4), size=3000))
    assert moment_bound_check(inside, 0.0, 1.0).verdict == Verdict.PASS
    outside = EmpiricalMeasure(np.full(100, 2.0))
    report = moment_bound_check(outside, 0.0, 1.0)
    assert report.verdict == Verdict.FAIL
    assert report.details["bootstrap_se"] == 0.0


# --- increment tail bound ---

def test_increment_bound_parts():
    parts = increment_bound(2.0, 0.5, 1.0, 0.5)
    assert parts["brownian"] == pytest.approx(48.0 / 16.0 * 0.25)
    assert parts["drift"] == pytest.approx(4.0 / 4.0 * 0.5 * 0.25)
    assert parts["total"] == pytest.approx(parts["brownian"] + parts["drift"])
    with pytest.raises(ParameterError):
        increment_bound(0.0, 0.5, 1.0, 0.5)


def test_increment_check_for_pure_noise(zero_drift):
    samples = increment_samples(zero_drift, 500, 5.0, 0.01, seed=3, lags=[0.5, 1.0])
    start, end = samples[0.5]
    report = increment_tail_check_samples(start, end, 2.0, 0.5, 0.0, 0.0)
    assert report.passed
    assert not report.details["automatic_pass"]
    wide = increment_tail_check_samples(*samples[1.0], 2.0, 1.0, 0.0, 0.0)
    assert wide.passed
    assert wide.details["automatic_pass"]


def test_increment_check_on_stored_ensemble(zero_drift):
    h = zero_past(zero_drift, 0.01)
    ensemble = simulate_ensemble(zero_drift, h, 200, 2.0, 0.01, seed=4)
    report = increment_tail_check(ensemble, 3.0, 0.5, 1.5, 0.0, 0.0)
    assert report.passed
    assert report.constants["dt"] == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        increment_tail_check(ensemble, 3.0, 1.5, 0.5, 0.0, 0.0)


def test_increment_check_needs_enough_samples():
    with pytest.raises(EstimationError):
        increment_tail_check_samples(np.zeros(10), np.ones(10), 1.0, 0.1, 0.0, 0.0)


def test_increment_lags_must_fit_in_horizon(zero_drift):
    with pytest.raises(ParameterError):
        increment_samples(zero_drift, 10, 1.0, 0.01, seed=0, lags=[2.0])


# --- window growth ---

def test_bounded_path_passes_growth_check():
    t = np.arange(0, 5001) * 0.01
    report = growth_diagnostic(Trajectory.from_path(np.sin(t), 0.01), K_window=1.0)
    assert report.passed
    assert report.details["windows"] == 50
    assert report.details["violations"] == 0
    assert len(report.curve) == 50


def test_exponential_path_fails_growth_check():
    t = np.arange(0, 2001) * 0.01
    report = growth_diagnostic(Trajectory.from_path(np.exp(t), 0.01))
    assert not report.passed
    assert report.details["first_violation"] == 2
    assert report.details["trend"] > 0.0


def test_growth_check_argument_errors():
    traj = Trajectory.from_path(np.zeros(301), 0.01)
    with pytest.raises(ParameterError):
        growth_diagnostic(traj, delta=0.05, delta0=0.1)
    with pytest.raises(EstimationError):
        growth_diagnostic(Trajectory.from_path(np.zeros(101), 0.01))


@pytest.mark.slow
def test_wiener_paths_pass_growth_check(zero_drift):
    h = zero_past(zero_drift, 0.01)
    ensemble = simulate_ensemble(zero_drift, h, 100, 200.0, 0.01, seed=31, threads=4)
    for traj in ensemble:
        assert growth_diagnostic(traj).passed


# --- energy inequality ---

def test_energy_inequality_holds_for_modulated_damping(md_spec):
    sample = energy_sample(md_spec, 500, 10.0, 0.01, seed=8)
    report = energy_inequality_check(sample, 0.0, 0.5)
    assert report.passed
    assert report.theoretical == pytest.approx(10.0)


def test_energy_identity_is_tight_for_ou():
    sample = energy_sample(DriftSpec(OrnsteinUhlenbeck(1.0)), 1000, 5.0, 0.01, seed=9)
    report = energy_inequality_check(sample, 0.0, 1.0)
    assert abs(report.empirical - report.theoretical) <= 2.0 * report.tolerance


def test_energy_check_fails_with_overstated_dissipation(md_spec):
    sample = energy_sample(md_spec, 500, 10.0, 0.01, seed=8)
    assert not energy_inequality_check(sample, 0.0, 5.0).passed


@pytest.mark.slow
def test_ou_ground_truth_variance(ou_spec):
    # 1 / (2 b) with b = 0.5
    m = kb_average(ou_spec, 2000, 100.0, 0.01, seed=3, threads=4)
    assert m.second_moment() == pytest.approx(1.0, abs=0.1)


# W1 between two independent n = 2000 samples of the same law stays below this
W1_NOISE_FLOOR = 0.1


@pytest.mark.slow
def test_independent_ou_runs_agree_within_noise_floor(ou_spec):
    one = kb_average(ou_spec, 2000, 100.0, 0.01, seed=40, threads=4)
    two = kb_average(ou_spec, 2000, 100.0, 0.01, seed=41, threads=4)
    assert w1_distance(one, two) <= W1_NOISE_FLOOR


@pytest.mark.slow
@pytest.mark.parametrize("name", ["ou", "modulated_damping"])
def test_terminal_and_uniform_time_measures_agree(name, ou_spec, md_spec):
    spec = ou_spec if name == "ou" else md_spec
    uniform = kb_average(spec, 2000, 100.0, 0.01, seed=50, threads=4)
    terminal = kb_average(spec, 2000, 100.0, 0.01, seed=51, mode=SamplingMode.TERMINAL, threads=4)
    assert w1_distance(uniform, terminal) <= W1_NOISE_FLOOR


@pytest.mark.slow
@pytest.mark.parametrize("name", ["ou", "modulated_damping"])
def test_kb_convergence_does_not_grow_with_horizon(name, ou_spec, md_spec):
    spec = ou_spec if name == "ou" else md_spec
    rows = kb_convergence(spec, [25.0, 50.0, 100.0], 2000, 0.01, seed=60, threads=4)
    excess = [max(row["excess"], 0.0) for row in rows]
    # resolution of a difference of two W1 estimates at n = 2000
    resolution = 2.0 * float(np.mean([row["noise_floor"] for row in rows]))
    for earlier, later in zip(excess, excess[1:]):
        assert later <= earlier + resolution
    assert all(row["w1"] <= W1_NOISE_FLOOR for row in rows)


@pytest.mark.slow
def test_modulated_damping_moment_bound(md_spec):
    m = kb_average(md_spec, 2000, 100.0, 0.01, seed=5, threads=4)
    report = moment_bound_check(m, 0.0, 0.5)
    assert report.theoretical == pytest.approx(1.0)
    assert report.passed


@pytest.mark.slow
def test_increment_tails_for_modulated_damping(md_spec):
    lags = [0.05, 0.1]
    samples = increment_samples(md_spec, 10_000, 50.0, 0.01, seed=6, lags=lags, threads=4)
    for lag in lags:
        start, end = samples[lag]
        for z in (0.5, 1.0, 2.0):
            assert increment_tail_check_samples(start, end, z, lag, 1.5, 1.0).passed
