"""
Tests for ARL estimation, threshold calibration and the advisory calculators
"""

import math

import numpy as np
import pytest

from utils.calibrate import (
    CalibrationSpec,
    NullPath,
    TuningInputs,
    advisory_bandwidth,
    advisory_threshold,
    advisory_window,
    arl_from_paths,
    calibrate_epsilon,
    estimate_arl,
    null_paths,
    scenario_null_source,
    validate_arl,
)
from utils.detector import DetectorConfig
from utils.kernels import KernelSpec
from utils.model import CateWatchError, GridExhausted
from utils.propensity import PropensityPolicy, constant_model

KERNEL = KernelSpec()
HALF = constant_model(0.5)


def _config(w=2, h=0.5, epsilon=math.inf):
    return DetectorConfig(w=w, h=h, epsilon=epsilon, kernel=KERNEL, propensity=HALF)


@pytest.fixture(scope="module")
def s1_source():
    return scenario_null_source(1, 3, n=8, seed=11)


class TestCalibrationSpec:
    def test_default_horizon(self):
        assert CalibrationSpec(gamma=20).horizon == 200
        assert CalibrationSpec(gamma=2.5).horizon == 25

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"gamma": 0.0},
            {"gamma": 20, "n_mc": 0},
            {"gamma": 20, "horizon": 10},
            {"gamma": 20, "mode": "anneal"},
            {"gamma": 20, "mode": "grid"},
        ],
    )
    def test_invalid_specs(self, kwargs):
        with pytest.raises(CateWatchError):
            CalibrationSpec(**kwargs)

    def test_grid_is_sorted(self):
        spec = CalibrationSpec(gamma=5, mode="grid", eps_grid=(0.3, 0.1, 0.2))
        assert spec.eps_grid == (0.1, 0.2, 0.3)


class TestNullPath:
    def test_run_length_counts_from_the_first_monitored_period(self):
        path = NullPath(replicate=0, start=5, length=20, times=np.array([8, 9, 10]), values=np.array([0.1, 0.7, 0.2]))
        assert path.run_length(0.5) == (5, False)
        assert path.run_length(0.05) == (4, False)
        assert path.run_length(1.0) == (20, True)


class TestEstimateArl:
    def test_zero_noise_runs_are_all_censored(self, zero_source, caplog):
        spec = CalibrationSpec(gamma=5, n_mc=6, horizon=30)
        with caplog.at_level("WARNING"):
            estimate = estimate_arl(zero_source, _config(epsilon=0.5), spec)
        assert estimate.mean == 30
        assert estimate.censored == 6
        assert estimate.sd == 0.0
        assert estimate.lower_bound
        assert "lower bound" in caplog.text

    def test_zero_threshold_alarms_when_the_buffer_fills(self, s1_source):
        spec = CalibrationSpec(gamma=5, n_mc=5, horizon=20)
        estimate = estimate_arl(s1_source, _config(w=3, epsilon=0.0), spec)
        assert estimate.mean == 6
        assert estimate.censored == 0
        assert estimate.run_lengths == (6.0,) * 5

    def test_standard_error(self):
        lengths = [NullPath(r, 1, 10, np.array([t]), np.array([1.0])) for r, t in enumerate((3, 5, 7))]
        estimate = arl_from_paths(lengths, 0.5, 10)
        assert estimate.mean == 5.0
        assert estimate.sd == pytest.approx(2.0)
        assert estimate.standard_error == pytest.approx(2.0 / math.sqrt(3))

    def test_single_run_has_zero_sd(self):
        estimate = arl_from_paths([NullPath(0, 1, 10, np.array([4]), np.array([1.0]))], 0.5, 10)
        assert (estimate.mean, estimate.sd) == (4.0, 0.0)

    def test_burn_in_wiring_monitors_a_full_horizon(self, s1_source):
        policy = PropensityPolicy(kind="constant", wiring="burn-in", burn_in=4)
        paths = null_paths(s1_source, _config(w=2), n_runs=3, horizon=15, policy=policy)
        assert [p.replicate for p in paths] == [0, 1, 2]
        assert all(p.length == 15 and p.start == 5 for p in paths)
        assert all(p.times[0] == 8 for p in paths)

    def test_monte_carlo_self_consistency(self):
        config = _config(w=3, h=20.0)
        spec = CalibrationSpec(gamma=20, n_mc=30, horizon=100)
        first = scenario_null_source(1, 3, n=10, seed=1)
        second = scenario_null_source(1, 3, n=10, seed=2)
        epsilon = calibrate_epsilon(first, 3, 20.0, KERNEL, HALF, spec).epsilon
        a = estimate_arl(first, config.with_changes(epsilon=epsilon), spec)
        b = estimate_arl(second, config.with_changes(epsilon=epsilon), spec)
        assert abs(a.mean - b.mean) <= 3.0 * math.hypot(a.standard_error, b.standard_error)


class TestCalibrateEpsilon:
    def test_zero_noise_returns_the_smallest_grid_value(self, zero_source):
        spec = CalibrationSpec(gamma=10, n_mc=4, horizon=40, mode="grid", eps_grid=(0.5, 0.1, 0.2))
        result = calibrate_epsilon(zero_source, 2, 0.5, KERNEL, HALF, spec)
        assert result.epsilon == 0.1
        assert result.arl.mean == 40

    def test_result_is_minimal_on_the_realized_candidates(self, s1_source):
        spec = CalibrationSpec(gamma=15, n_mc=8, horizon=60)
        result = calibrate_epsilon(s1_source, 2, 0.5, KERNEL, HALF, spec)
        assert result.arl.mean >= 15

        paths = null_paths(s1_source, _config(w=2, h=0.5), 8, 60)
        realized = np.concatenate([p.values[np.isfinite(p.values)] for p in paths])
        assert result.epsilon in set(realized.tolist()) | {0.0} or result.epsilon > realized.max()
        previous = max([0.0] + realized[realized < result.epsilon].tolist())
        assert arl_from_paths(paths, previous, 60).mean < 15

    def test_arl_is_monotone_on_common_random_numbers(self, s1_source):
        paths = null_paths(s1_source, _config(w=2, h=0.5), 8, 60)
        means = [arl_from_paths(paths, e, 60).mean for e in np.linspace(0.0, 5.0, 51)]
        assert all(b >= a for a, b in zip(means, means[1:]))

    def test_bisection_agrees_with_the_realized_search(self, s1_source):
        realized = calibrate_epsilon(s1_source, 2, 0.5, KERNEL, HALF, CalibrationSpec(gamma=15, n_mc=8, horizon=60))
        spec = CalibrationSpec(gamma=15, n_mc=8, horizon=60, mode="bisect", eps_lo=0.0, eps_hi=20.0, eps_tol=1e-4)
        bisected = calibrate_epsilon(s1_source, 2, 0.5, KERNEL, HALF, spec)

        paths = null_paths(s1_source, _config(w=2, h=0.5), 8, 60)
        values = np.concatenate([p.values for p in paths])
        previous = max([0.0] + values[values < realized.epsilon].tolist())
        # alarm times only change at realized values, so both land in (previous, realized]
        assert previous < bisected.epsilon <= realized.epsilon
        assert bisected.epsilon <= previous + 1e-4
        assert bisected.arl == realized.arl

    def test_grid_exhausted(self, s1_source):
        spec = CalibrationSpec(gamma=30, n_mc=4, horizon=60, mode="grid", eps_grid=(0.0,))
        with pytest.raises(GridExhausted):
            calibrate_epsilon(s1_source, 2, 0.5, KERNEL, HALF, spec)

    def test_bisection_exhausted(self, s1_source):
        spec = CalibrationSpec(gamma=30, n_mc=4, horizon=60, mode="bisect", eps_hi=0.0)
        with pytest.raises(GridExhausted):
            calibrate_epsilon(s1_source, 2, 0.5, KERNEL, HALF, spec)

    def test_deterministic_under_parallelism(self, s1_source):
        serial = calibrate_epsilon(s1_source, 2, 0.5, KERNEL, HALF, CalibrationSpec(gamma=10, n_mc=6, horizon=40))
        parallel = calibrate_epsilon(
            s1_source, 2, 0.5, KERNEL, HALF, CalibrationSpec(gamma=10, n_mc=6, horizon=40, n_jobs=2)
        )
        assert serial.epsilon == parallel.epsilon
        assert serial.arl == parallel.arl

    def test_propensity_policy_is_refitted(self):
        source = scenario_null_source(2, 3, n=10, seed=5)
        policy = PropensityPolicy(kind="logistic")
        result = calibrate_epsilon(source, 2, 0.5, KERNEL, policy, CalibrationSpec(gamma=8, n_mc=3, horizon=30))
        assert result.arl.mean >= 8

    def test_result_document(self, zero_source):
        spec = CalibrationSpec(gamma=10, n_mc=3, horizon=40, mode="grid", eps_grid=(0.1,), base_seed=42)
        document = calibrate_epsilon(zero_source, 2, 0.5, KERNEL, HALF, spec).to_dict()
        assert document["epsilon"] == 0.1
        assert document["arl_estimate"] == 40
        assert document["censored"] == 3
        assert document["lower_bound"] is True
        assert document["seeds"] == {"base_seed": 42, "replicates": [0, 1, 2]}

    def test_validation_pass_uses_the_given_source(self, zero_source):
        estimate = validate_arl(zero_source, _config(epsilon=0.0), n_runs=5, horizon=25)
        assert estimate.n_runs == 5
        assert estimate.mean == 4


class TestAdvisory:
    def _inputs(self, **changes):
        values = dict(sigma=1.0, n=1, d=1, w=1, gamma=math.e, gamma_alpha=2.0)
        values.update(changes)
        return TuningInputs(**values)

    def test_unit_plug_in_bandwidth(self):
        inputs = self._inputs()
        assert inputs.gamma_1 == 1.0
        assert advisory_bandwidth(inputs) == pytest.approx(1.0, abs=1e-12)

    def test_bandwidth_homogeneity_in_noise_variance(self):
        base = self._inputs(sigma=1.3, n=40, d=3, w=3, gamma=20.0, gamma_alpha=1.0)
        doubled = self._inputs(sigma=1.3 * math.sqrt(2.0), n=40, d=3, w=3, gamma=20.0, gamma_alpha=1.0)
        assert advisory_bandwidth(doubled) / advisory_bandwidth(base) == pytest.approx(2.0 ** (1.0 / 5.0), abs=1e-12)

    def test_weak_dependence_limit_uses_the_independent_branch(self):
        inputs = self._inputs(sigma=1.0, n=40, d=3, w=10, gamma=20.0, gamma_alpha=1e12)
        expected = (math.log(200.0) / (40 * 10)) ** (1.0 / 5.0)
        assert advisory_bandwidth(inputs) == pytest.approx(expected, rel=1e-9)

    def test_one_change_case_needs_delta(self):
        with pytest.raises(CateWatchError):
            advisory_bandwidth(self._inputs(), case="one-change")
        inputs = self._inputs(sigma=1.0, n=40, d=3, w=3, gamma=20.0, gamma_alpha=1.0, delta=50.0)
        assert advisory_bandwidth(inputs, case="one-change") > advisory_bandwidth(inputs)

    def test_short_horizon_floors_the_log_term(self, caplog):
        with caplog.at_level("WARNING"):
            short = advisory_bandwidth(self._inputs(gamma=0.5))
        assert short == advisory_bandwidth(self._inputs())
        assert "below e" in caplog.text
        assert advisory_window(self._inputs(gamma=0.2, kappa=1.0)) == 1
        assert advisory_threshold(self._inputs(gamma=0.9)) == pytest.approx(1.0, abs=1e-12)

    def test_constant_multiplier(self):
        inputs = self._inputs(n=40, d=3, w=3, gamma=20.0)
        assert advisory_bandwidth(inputs, c_h=2.5) == pytest.approx(2.5 * advisory_bandwidth(inputs), abs=1e-12)

    def test_unit_window(self):
        inputs = self._inputs(kappa=1.0)
        assert advisory_window(inputs, rounded=False) == pytest.approx(1.0, abs=1e-12)
        assert advisory_window(inputs) == 1

    def test_window_decreases_with_jump_size(self):
        values = [
            advisory_window(self._inputs(n=40, d=3, gamma=20.0, gamma_alpha=1.0, kappa=k), rounded=False)
            for k in np.linspace(0.2, 3.0, 15)
        ]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_window_halves_when_n_doubles(self):
        first = self._inputs(sigma=100.0, n=1, gamma=100.0, gamma_alpha=1.0, kappa=1.0)
        second = self._inputs(sigma=100.0, n=2, gamma=100.0, gamma_alpha=1.0, kappa=1.0)
        ratio = advisory_window(second, rounded=False) / advisory_window(first, rounded=False)
        assert ratio == pytest.approx(0.5, abs=1e-12)

    def test_window_needs_jump_size(self):
        with pytest.raises(CateWatchError):
            advisory_window(self._inputs())

    def test_threshold_takes_the_propensity_error(self):
        inputs = self._inputs(n=40, d=3, w=3, gamma=20.0)
        assert advisory_threshold(inputs, propensity_error=5.0) == 5.0
        assert advisory_threshold(inputs) == pytest.approx(advisory_bandwidth(inputs), abs=1e-12)
        assert advisory_threshold(inputs, case="one-change", h=0.3, propensity_error=0.1) == 0.3

    def test_invalid_inputs(self):
        with pytest.raises(CateWatchError):
            self._inputs(sigma=-1.0)
        with pytest.raises(CateWatchError):
            self._inputs(kappa=0.0)
