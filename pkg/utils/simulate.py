"""
Scenario Simulator
==================
Generative models for the four monitoring scenarios and the one-shot
One-K vs Two-K comparison dataset.

Every run is a panel of n subjects over T periods:

    Y(0) = mu0(X) + e(0),  Y(1) = mu0(X) + tau_t(X) + e(1),
    Z ~ Bernoulli(pi(X)),  Y = Z Y(1) + (1 - Z) Y(0),  X ~ Unif([0, 1]^d)

Randomness comes from counter-based Philox generators keyed by
(seed, replicate, stream), so replicates can be generated in any order or in
parallel and still reproduce bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import beta as beta_function
from scipy.special import expit
from scipy.stats import norm

from utils.model import CateWatchError, DimensionTooSmall, TimeBatch, UnknownScenario

logger = logging.getLogger(__name__)

SCENARIO_IDS = (1, 2, 3, 4)
MIN_DIMENSION = {1: 1, 2: 2, 3: 2, 4: 3}

# substream ids
COVARIATES = 0
TREATMENT = 1
ERRORS_ARM0 = 2
ERRORS_ARM1 = 3

PROPENSITY_FLOOR = 1e-6
X1_FLOOR = 1e-12
CURVE_SAMPLE_SIZE = 4000


def substream(seed, replicate, stream) -> np.random.Generator:
    """Independent Philox generator for one (seed, replicate, stream) key"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate), int(stream)])))


def derive_seed(base_seed, purpose) -> int:
    """Stable 63-bit seed for a named purpose ('calibration', 'validation', ...)"""
    tag = [ord(ch) for ch in str(purpose)]
    return int(np.random.SeedSequence([int(base_seed), *tag]).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


# =====================================================
# SPECIFICATIONS
# =====================================================

@dataclass(frozen=True)
class ErrorProcessSpec:
    """
    Moving-average error process

    Periods 1..warmup emit raw N(0, 1) innovations; later periods emit
    sum_j weights[j] * innovation[t - j] / normalizer.
    """
    weights: tuple = (1.0,)
    normalizer: float = 1.0
    warmup: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.weights:
            raise CateWatchError("An error process needs at least one tap")
        if not self.normalizer > 0:
            raise CateWatchError(f"Normalizer must be positive, got {self.normalizer}")
        if self.warmup < len(self.weights) - 1:
            raise CateWatchError(f"Warm-up {self.warmup} is shorter than the MA order {len(self.weights) - 1}")

    @property
    def long_run_variance(self) -> float:
        return sum(w * w for w in self.weights) / self.normalizer ** 2


IID_ERRORS = ErrorProcessSpec()
MA3_ERRORS = ErrorProcessSpec(weights=(1.0, 1.0, 1.0, 1.0), normalizer=4.0, warmup=3)
MA4_ERRORS = ErrorProcessSpec(weights=(1.0, 1.0, 1.0, 1.0, 1.0), normalizer=8.0, warmup=4)


@dataclass(frozen=True)
class ScenarioSpec:
    """
    Full description of one simulated panel

    Attributes:
        id: scenario 1-4
        d: covariate dimension
        T: horizon
        n: subjects per period
        delta: change time; math.inf yields pre-change data only
        seed: base seed
        replicate: replicate index (part of every substream key)
        noise_scale: multiplier on the error paths (0 gives noiseless panels)
        share_innovations: both arms reuse the control arm's innovations
    """
    id: int
    d: int = 3
    T: int = 100
    n: int = 40
    delta: float = 50
    seed: int = 0
    replicate: int = 0
    noise_scale: float = 1.0
    share_innovations: bool = False

    def __post_init__(self):
        if self.id not in SCENARIO_IDS:
            raise UnknownScenario(f"Unknown scenario {self.id}; choose from {SCENARIO_IDS}")
        if self.d < MIN_DIMENSION[self.id]:
            raise DimensionTooSmall(f"Scenario {self.id} needs d >= {MIN_DIMENSION[self.id]}, got {self.d}")
        if self.T < 1 or self.n < 1:
            raise CateWatchError(f"Horizon and panel size must be positive (T={self.T}, n={self.n})")
        if not (self.delta == math.inf or 1 <= self.delta < self.T):
            raise CateWatchError(f"Change time must satisfy 1 <= delta < T or be infinite, got {self.delta}")

    def with_changes(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)


@dataclass(frozen=True)
class ScenarioFunctions:
    """Closed forms of one scenario; every function is vectorised over rows of X"""
    mu0: Callable
    tau: Callable
    pi: Callable
    errors: ErrorProcessSpec
    propensity_kind: str


# =====================================================
# SCENARIO CLOSED FORMS
# =====================================================

def _after(t, delta):
    return 1.0 if t > delta else 0.0


def _logistic_bump(v):
    return 1.0 + expit(20.0 * (v - 1.0 / 3.0))


def _safe_x1(X):
    return np.maximum(X[:, 0], X1_FLOOR)


def scenario_functions(scenario_id, d) -> ScenarioFunctions:
    """
    Closed-form mean, CATE, propensity and error process of a scenario

    Args:
        scenario_id: 1-4
        d: covariate dimension

    Returns:
        ScenarioFunctions: mu0(X), tau(t, delta, X), pi(X), error process

    Raises:
        UnknownScenario, DimensionTooSmall
    """
    if scenario_id not in SCENARIO_IDS:
        raise UnknownScenario(f"Unknown scenario {scenario_id}; choose from {SCENARIO_IDS}")
    if d < MIN_DIMENSION[scenario_id]:
        raise DimensionTooSmall(f"Scenario {scenario_id} needs d >= {MIN_DIMENSION[scenario_id]}, got {d}")

    if scenario_id == 1:
        return ScenarioFunctions(
            mu0=lambda X: np.sum(X * X, axis=1),
            tau=lambda t, delta, X: X[:, 0] * _after(t, delta),
            pi=lambda X: np.full(X.shape[0], 0.5),
            errors=IID_ERRORS,
            propensity_kind="constant",
        )

    if scenario_id == 2:
        b25 = beta_function(2.0, 5.0)
        return ScenarioFunctions(
            mu0=lambda X: 2.0 * X[:, 0] - 1.0,
            tau=lambda t, delta, X: (X[:, 0] + X[:, 1] / 2.0) * _after(t, delta),
            pi=lambda X: 0.25 * X[:, 0] * (1.0 - X[:, 0]) ** 4 / b25,
            errors=MA3_ERRORS,
            propensity_kind="logistic",
        )

    if scenario_id == 3:
        return ScenarioFunctions(
            mu0=lambda X: np.cos(100.0 / _safe_x1(X)),
            tau=lambda t, delta, X: (2.0 if t > delta else 1.0) * _logistic_bump(X[:, 0]) * _logistic_bump(X[:, 1]),
            pi=lambda X: np.full(X.shape[0], 0.5),
            errors=MA3_ERRORS,
            propensity_kind="constant",
        )

    coefficients = np.zeros(d)
    coefficients[:3] = (1.0, -1.0, 1.0)
    return ScenarioFunctions(
        mu0=lambda X: np.cos(300.0 / _safe_x1(X)),
        tau=lambda t, delta, X: (2.0 * X[:, 0] + 3.0 * X[:, 1]) * _after(t, delta),
        pi=lambda X: norm.cdf(X @ coefficients),
        errors=MA4_ERRORS,
        propensity_kind="logistic",
    )


def jump_size(scenario_id, d) -> float:
    """Sup-norm of tau_{delta+1} - tau_delta over the unit cube"""
    functions = scenario_functions(scenario_id, d)
    corner = np.ones((1, d))
    return float(abs(functions.tau(2, 1, corner)[0] - functions.tau(1, 1, corner)[0]))


# =====================================================
# ERROR PATHS
# =====================================================

def ma_error_paths(spec: ErrorProcessSpec, T, n, seed, replicate=0, share_innovations=False):
    """
    Error paths for both potential-outcome arms

    Args:
        spec: error process
        T: periods
        n: subjects
        seed: base seed
        replicate: replicate index
        share_innovations: reuse the control innovations for the treated arm

    Returns:
        tuple: (errors_arm0, errors_arm1), each an (n, T) array; row i is
        subject i's path and comes from its own segment of the arm stream
    """
    if T < spec.warmup:
        raise CateWatchError(f"Horizon T={T} is shorter than the warm-up {spec.warmup}")

    paths = []
    for stream in (ERRORS_ARM0, ERRORS_ARM1):
        if stream == ERRORS_ARM1 and share_innovations:
            paths.append(paths[0].copy())
            continue
        innovations = substream(seed, replicate, stream).standard_normal((n, T))
        errors = innovations.copy()
        if T > spec.warmup:
            moving = np.zeros((n, T - spec.warmup))
            for lag, weight in enumerate(spec.weights):
                moving += weight * innovations[:, spec.warmup - lag : T - lag]
            errors[:, spec.warmup :] = moving / spec.normalizer
        paths.append(errors)
    return paths[0], paths[1]


# =====================================================
# PANEL GENERATION
# =====================================================

def generate(spec: ScenarioSpec) -> list:
    """
    Simulate one panel

    Args:
        spec: scenario specification

    Returns:
        list: TimeBatch for t = 1..T
    """
    functions = scenario_functions(spec.id, spec.d)
    T, n, d = spec.T, spec.n, spec.d

    X = substream(spec.seed, spec.replicate, COVARIATES).random((T, n, d))
    uniforms = substream(spec.seed, spec.replicate, TREATMENT).random((T, n))
    errors0, errors1 = ma_error_paths(
        functions.errors, T, n, spec.seed, spec.replicate, share_innovations=spec.share_innovations
    )
    subjects = np.arange(1, n + 1)

    batches = []
    for k in range(T):
        t = k + 1
        X_t = X[k]
        pi_t = np.clip(functions.pi(X_t), PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR)
        z = (uniforms[k] < pi_t).astype(np.int64)
        mean0 = functions.mu0(X_t)
        y0 = mean0 + spec.noise_scale * errors0[:, k]
        y1 = mean0 + functions.tau(t, spec.delta, X_t) + spec.noise_scale * errors1[:, k]
        y = np.where(z == 1, y1, y0)
        batches.append(TimeBatch(t=t, subjects=subjects, y=y, x=X_t, z=z))

    logger.debug(f"Generated scenario {spec.id} replicate {spec.replicate}: T={T}, n={n}, d={d}, delta={spec.delta}")
    return batches


# =====================================================
# ONE-SHOT COMPARISON DATASET
# =====================================================

def curve_mu0(x):
    x = np.asarray(x, dtype=float)
    return np.cos(100.0 / np.maximum(x, X1_FLOOR))


def curve_tau(x):
    return expit(20.0 * (np.asarray(x, dtype=float) - 1.0 / 3.0))


def curve_dataset(n=CURVE_SAMPLE_SIZE, seed=0) -> TimeBatch:
    """
    Single-period cross-section with d = 1, pi = 0.5 and iid N(0, 1) errors

    Returns:
        TimeBatch: the cross-section at t = 1
    """
    if n < 1:
        raise CateWatchError(f"Need at least one subject, got n={n}")
    x = substream(seed, 0, COVARIATES).random(n)
    z = (substream(seed, 0, TREATMENT).random(n) < 0.5).astype(np.int64)
    errors0, errors1 = ma_error_paths(IID_ERRORS, 1, n, seed)
    mean0 = curve_mu0(x)
    y = np.where(z == 1, mean0 + curve_tau(x) + errors1[:, 0], mean0 + errors0[:, 0])
    return TimeBatch(t=1, subjects=np.arange(1, n + 1), y=y, x=x.reshape(-1, 1), z=z)
