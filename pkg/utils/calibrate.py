"""
Threshold Calibration
=====================
Monte-Carlo average-run-length (ARL) estimation on no-change streams,
threshold calibration to a target ARL, and advisory tuning calculators.

Calibration uses common random numbers: every candidate threshold is scored on
the same replicate streams. The detector statistic path of each replicate is
computed once; the alarm time for a threshold epsilon is the first time the
path reaches epsilon, so alarm times are monotone in epsilon on the realized
sample and the search is exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from utils.detector import DetectorConfig, first_alarm, statistic_path
from utils.kernels import KernelSpec
from utils.model import CateWatchError, GridExhausted
from utils.propensity import PropensityModel, PropensityPolicy, constant_model
from utils.simulate import ScenarioSpec, generate

logger = logging.getLogger(__name__)

SEARCH_MODES = ("realized", "grid", "bisect")


@dataclass(frozen=True)
class CalibrationSpec:
    """
    Monte-Carlo calibration settings

    Attributes:
        gamma: target ARL
        n_mc: replications
        horizon: periods per run (defaults to ceil(10 * gamma))
        mode: 'realized' searches the realized statistic values, 'grid' an
            explicit eps_grid, 'bisect' the interval [eps_lo, eps_hi]
        eps_grid: candidate thresholds for mode 'grid'
        eps_lo, eps_hi, eps_tol: bisection bounds and tolerance
        base_seed: seed of the replicate streams
        n_jobs: joblib workers for the replicate fan-out
    """
    gamma: float
    n_mc: int = 100
    horizon: int | None = None
    mode: str = "realized"
    eps_grid: tuple | None = None
    eps_lo: float = 0.0
    eps_hi: float = 10.0
    eps_tol: float = 1e-4
    base_seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if not self.gamma > 0:
            raise CateWatchError(f"Target ARL must be positive, got {self.gamma}")
        if self.n_mc < 1:
            raise CateWatchError(f"Need at least one replication, got n_mc={self.n_mc}")
        horizon = self.horizon if self.horizon is not None else int(math.ceil(10 * self.gamma))
        if horizon < self.gamma:
            raise CateWatchError(f"Horizon {horizon} is shorter than the target ARL {self.gamma}")
        object.__setattr__(self, "horizon", int(horizon))
        if self.mode not in SEARCH_MODES:
            raise CateWatchError(f"Unknown search mode '{self.mode}'; choose from {SEARCH_MODES}")
        if self.mode == "grid":
            if not self.eps_grid:
                raise CateWatchError("Grid search needs a non-empty eps_grid")
            object.__setattr__(self, "eps_grid", tuple(sorted(float(e) for e in self.eps_grid)))


@dataclass(frozen=True)
class ArlEstimate:
    """Mean run length over replications; a lower bound when any run was censored"""
    mean: float
    sd: float
    censored: int
    n_runs: int
    horizon: int
    run_lengths: tuple = field(repr=False, default=())

    @property
    def lower_bound(self) -> bool:
        return self.censored > 0

    @property
    def standard_error(self) -> float:
        return self.sd / math.sqrt(self.n_runs)


@dataclass(frozen=True)
class CalibrationResult:
    epsilon: float
    arl: ArlEstimate
    base_seed: int
    replicates: tuple

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "arl_estimate": self.arl.mean,
            "sd": self.arl.sd,
            "censored": self.arl.censored,
            "lower_bound": self.arl.lower_bound,
            "n_mc": self.arl.n_runs,
            "horizon": self.arl.horizon,
            "seeds": {"base_seed": self.base_seed, "replicates": list(self.replicates)},
        }


@dataclass(frozen=True)
class NullPath:
    """Statistic path of one replicate; run length counts from the first monitored period"""
    replicate: int
    start: int
    length: int
    times: np.ndarray
    values: np.ndarray

    def run_length(self, epsilon):
        t = first_alarm(self.times, self.values, epsilon)
        if t is None:
            return self.length, True
        return t - self.start + 1, False


# =====================================================
# NO-CHANGE STREAM SOURCES
# =====================================================

@dataclass(frozen=True)
class ScenarioNullSource:
    """Pre-change scenario streams: source(replicate, length) -> batches"""
    scenario_id: int
    d: int
    n: int = 40
    seed: int = 0
    noise_scale: float = 1.0

    def __call__(self, replicate, length):
        spec = ScenarioSpec(
            id=self.scenario_id,
            d=self.d,
            T=int(length),
            n=self.n,
            delta=math.inf,
            seed=self.seed,
            replicate=replicate,
            noise_scale=self.noise_scale,
        )
        return generate(spec)


def scenario_null_source(scenario_id, d, n=40, seed=0, noise_scale=1.0) -> ScenarioNullSource:
    return ScenarioNullSource(scenario_id, d, n=n, seed=seed, noise_scale=noise_scale)


# =====================================================
# ARL ESTIMATION
# =====================================================

def _null_path(source: Callable, config: DetectorConfig, policy, replicate, horizon) -> NullPath:
    extra = 0
    if isinstance(policy, PropensityPolicy) and policy.kind != "known" and policy.wiring == "burn-in":
        extra = policy.burn_in if policy.burn_in is not None else 2 * config.w
    batches = list(source(replicate, horizon + extra))[: horizon + extra]

    if isinstance(policy, PropensityPolicy):
        model, batches = policy.resolve(batches, config.w)
        config = config.with_changes(propensity=model)
    elif isinstance(policy, PropensityModel):
        config = config.with_changes(propensity=policy)

    times, values = statistic_path(batches, config)
    start = batches[0].t if batches else 1
    return NullPath(replicate, start, len(batches), times, values)


def null_paths(source: Callable, config: DetectorConfig, n_runs, horizon, policy=None, n_jobs=1) -> list:
    """Statistic paths of n_runs no-change replicates, ordered by replicate index"""
    if n_jobs == 1:
        paths = [_null_path(source, config, policy, r, horizon) for r in range(n_runs)]
    else:
        paths = Parallel(n_jobs=n_jobs)(
            delayed(_null_path)(source, config, policy, r, horizon) for r in range(n_runs)
        )
    return sorted(paths, key=lambda path: path.replicate)


def arl_from_paths(paths: Sequence[NullPath], epsilon, horizon) -> ArlEstimate:
    """ARL estimate for one threshold over precomputed paths"""
    lengths, censored = [], 0
    for path in paths:
        length, was_censored = path.run_length(epsilon)
        lengths.append(length)
        censored += int(was_censored)
    lengths = np.asarray(lengths, dtype=float)
    sd = float(lengths.std(ddof=1)) if lengths.size > 1 else 0.0
    return ArlEstimate(float(lengths.mean()), sd, censored, lengths.size, int(horizon), tuple(lengths.tolist()))


def estimate_arl(source: Callable, config: DetectorConfig, spec: CalibrationSpec, policy=None) -> ArlEstimate:
    """
    Monte-Carlo ARL of a detector configuration on no-change streams

    Args:
        source: callable (replicate, length) -> no-change batches
        config: detector configuration (its epsilon is scored)
        spec: calibration settings (n_mc, horizon, n_jobs)
        policy: optional PropensityPolicy re-fitted on every replicate

    Returns:
        ArlEstimate: censored runs contribute the horizon
    """
    paths = null_paths(source, config, spec.n_mc, spec.horizon, policy=policy, n_jobs=spec.n_jobs)
    estimate = arl_from_paths(paths, config.epsilon, spec.horizon)
    if estimate.lower_bound:
        logger.warning(
            f"ARL {estimate.mean:.2f} is a lower bound: {estimate.censored}/{estimate.n_runs} runs censored at {spec.horizon}"
        )
    return estimate


def _search(paths, spec: CalibrationSpec):
    def passes(epsilon):
        return arl_from_paths(paths, epsilon, spec.horizon).mean >= spec.gamma

    if spec.mode == "bisect":
        lo, hi = spec.eps_lo, spec.eps_hi
        if passes(lo):
            return lo
        if not passes(hi):
            raise GridExhausted(f"ARL stays below {spec.gamma} at epsilon={hi}")
        while hi - lo > spec.eps_tol:
            mid = 0.5 * (lo + hi)
            if passes(mid):
                hi = mid
            else:
                lo = mid
        return hi

    if spec.mode == "grid":
        candidates = list(spec.eps_grid)
    else:
        realized = np.concatenate([p.values[np.isfinite(p.values)] for p in paths] or [np.empty(0)])
        candidates = sorted(set(realized.tolist()) | {0.0})
        candidates.append(float(np.nextafter(candidates[-1], np.inf)))

    # ARL is non-decreasing in epsilon on common random numbers: binary search the first pass
    lo, hi = 0, len(candidates)
    while lo < hi:
        mid = (lo + hi) // 2
        if passes(candidates[mid]):
            hi = mid
        else:
            lo = mid + 1
    if lo == len(candidates):
        raise GridExhausted(f"ARL stays below {spec.gamma} at the largest candidate epsilon={candidates[-1]}")
    return float(candidates[lo])


def calibrate_epsilon(
    source: Callable,
    w,
    h,
    kernel: KernelSpec,
    propensity,
    spec: CalibrationSpec,
    estimator="one-k",
    eval_policy="current-window",
    grid_points=None,
) -> CalibrationResult:
    """
    Smallest threshold whose Monte-Carlo ARL reaches the target

    Args:
        source: callable (replicate, length) -> no-change batches
        w, h, kernel: detector tuning
        propensity: PropensityModel, or PropensityPolicy re-fitted per replicate
        spec: calibration settings
        estimator: 'one-k' or 'dk'

    Returns:
        CalibrationResult

    Raises:
        GridExhausted: the largest candidate still alarms too early on average
    """
    config = DetectorConfig(
        w=w,
        h=h,
        epsilon=math.inf,
        kernel=kernel,
        propensity=propensity if isinstance(propensity, PropensityModel) else constant_model(0.5),
        estimator=estimator,
        eval_policy=eval_policy,
        grid_points=grid_points,
    )
    policy = propensity if isinstance(propensity, PropensityPolicy) else None
    paths = null_paths(source, config, spec.n_mc, spec.horizon, policy=policy, n_jobs=spec.n_jobs)
    epsilon = _search(paths, spec)
    arl = arl_from_paths(paths, epsilon, spec.horizon)
    logger.info(
        f"Calibrated epsilon={epsilon:.5f} ({estimator}, w={w}, h={h}): ARL {arl.mean:.2f} "
        f"(sd {arl.sd:.2f}, censored {arl.censored}/{arl.n_runs}) for target {spec.gamma}"
    )
    return CalibrationResult(epsilon, arl, spec.base_seed, tuple(p.replicate for p in paths))


def validate_arl(source: Callable, config: DetectorConfig, n_runs=200, horizon=200, policy=None, n_jobs=1) -> ArlEstimate:
    """ARL of a calibrated configuration on a fresh set of replicate streams"""
    paths = null_paths(source, config, n_runs, horizon, policy=policy, n_jobs=n_jobs)
    return arl_from_paths(paths, config.epsilon, horizon)


# =====================================================
# ADVISORY TUNING
# =====================================================

@dataclass(frozen=True)
class TuningInputs:
    """
    Inputs of the advisory tuning formulas

    Attributes:
        sigma: sub-Gaussian noise scale
        n, d, w: panel size, covariate dimension, window half-width
        gamma: target ARL
        gamma_alpha: mixing exponent
        delta: change time (one-change case)
        kappa: jump size
    """
    sigma: float
    n: int
    d: int
    w: int
    gamma: float
    gamma_alpha: float
    delta: float | None = None
    kappa: float | None = None

    def __post_init__(self):
        for name in ("sigma", "n", "d", "w", "gamma", "gamma_alpha"):
            if not getattr(self, name) > 0:
                raise CateWatchError(f"Tuning input {name} must be positive")
        if self.delta is not None and not self.delta > 0:
            raise CateWatchError("Tuning input delta must be positive")
        if self.kappa is not None and not self.kappa > 0:
            raise CateWatchError("Tuning input kappa must be positive")

    @property
    def gamma_1(self) -> float:
        return 2.0 * self.gamma_alpha / (2.0 + self.gamma_alpha)


def _log_term(value, label):
    """log(value) with the argument floored at e, so the term is at least 1"""
    if value < math.e:
        logger.warning(f"{label} = {value:g} is below e; using a log term of 1")
        return 1.0
    return math.log(value)


def _rate_branches(inputs: TuningInputs, log_term):
    power = 1.0 / (inputs.d + 2)
    s2 = inputs.sigma ** 2
    dependent = (s2 * log_term ** (2.0 / inputs.gamma_1) / (inputs.n * inputs.w ** 2)) ** power
    independent = (s2 * log_term / (inputs.n * inputs.w)) ** power
    return dependent, independent


def advisory_bandwidth(inputs: TuningInputs, case="no-change", c_h=1.0) -> float:
    """
    Order-of-magnitude kernel bandwidth

    Args:
        inputs: tuning inputs
        case: 'no-change' uses log(gamma * w); 'one-change' uses log(gamma * delta * w);
            arguments below e are floored at e
        c_h: unknown absolute constant

    Returns:
        float: c_h * max(dependent branch, independent branch)
    """
    if case == "no-change":
        log_term = _log_term(inputs.gamma * inputs.w, "gamma * w")
    elif case == "one-change":
        if inputs.delta is None:
            raise CateWatchError("The one-change bandwidth needs delta")
        log_term = _log_term(inputs.gamma * inputs.delta * inputs.w, "gamma * delta * w")
    else:
        raise CateWatchError(f"Unknown case '{case}'")
    return c_h * max(_rate_branches(inputs, log_term))


def advisory_window(inputs: TuningInputs, c_1=1.0, rounded=True):
    """
    Minimal window half-width for detecting a jump of size kappa

    Returns:
        int when rounded (ceil, at least 1), otherwise the raw float
    """
    if inputs.kappa is None:
        raise CateWatchError("The advisory window needs the jump size kappa")
    horizon = max(inputs.gamma, inputs.delta or 0.0)
    log_term = _log_term(horizon, "max(gamma, delta)")
    scale = inputs.sigma ** 2 / (inputs.n * inputs.kappa ** (inputs.d + 2))
    raw = c_1 * max(scale * log_term, math.sqrt(scale * log_term ** (2.0 / inputs.gamma_1)))
    if not rounded:
        return raw
    return max(1, int(math.ceil(raw)))


def advisory_threshold(inputs: TuningInputs, case="no-change", propensity_error=0.0, c_eps=1.0, h=None) -> float:
    """
    Order-of-magnitude alarm threshold

    The no-change case takes the rate branches and the propensity error; the
    one-change case takes the bandwidth (advisory one-change value unless h is
    given) and the propensity error.
    """
    if case == "no-change":
        log_term = _log_term(inputs.gamma * inputs.w, "gamma * w")
        return c_eps * max(*_rate_branches(inputs, log_term), propensity_error)
    if case == "one-change":
        h = advisory_bandwidth(inputs, "one-change") if h is None else h
        return c_eps * max(h, propensity_error)
    raise CateWatchError(f"Unknown case '{case}'")
