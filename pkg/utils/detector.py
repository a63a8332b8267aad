"""
Online CATE Change Detector
===========================
Sliding-window detector: keep the most recent 2w batches, estimate the CATE
function on the older and on the newer half, and raise an alert once the
largest absolute discrepancy over the evaluation points reaches epsilon.

Two estimators are supported:
- one-k: kernel regression of the inverse-propensity transformed outcome
- dk: difference of the treated and control kernel regressions

Evaluation points are either every covariate currently buffered
('current-window', scanned time-major then subject-minor) or a fixed grid.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from utils.kernels import KernelSpec, dk_cate_arrays, nw_cate_arrays, transformed_outcomes
from utils.model import (
    AllPointsSkipped,
    AlreadyAlarmed,
    BufferNotFull,
    CateWatchError,
    DimensionMismatch,
    EmptyPeriod,
    NonContiguousTime,
    TimeBatch,
)
from utils.propensity import PropensityModel, constant_model, predict_many

logger = logging.getLogger(__name__)

ESTIMATORS = ("one-k", "dk")
EVAL_POLICIES = ("current-window", "fixed-grid")


@dataclass(frozen=True)
class DetectorConfig:
    """
    Detector tuning

    Attributes:
        w: half-width of the 2w-batch buffer
        h: kernel bandwidth
        epsilon: alarm threshold (0 alarms at the first statistic, inf never alarms)
        kernel: kernel specification
        propensity: pi-hat used by the one-k estimator
        estimator: 'one-k' or 'dk'
        eval_policy: 'current-window' or 'fixed-grid'
        grid_points: (m, d) evaluation points for the fixed-grid policy
    """
    w: int
    h: float
    epsilon: float
    kernel: KernelSpec = field(default_factory=KernelSpec)
    propensity: PropensityModel = field(default_factory=lambda: constant_model(0.5))
    estimator: str = "one-k"
    eval_policy: str = "current-window"
    grid_points: np.ndarray | None = None

    def __post_init__(self):
        if int(self.w) != self.w or self.w < 1:
            raise CateWatchError(f"Window half-width must be a positive integer, got {self.w}")
        if not self.h > 0:
            raise CateWatchError(f"Bandwidth must be positive, got {self.h}")
        if not self.epsilon >= 0:
            raise CateWatchError(f"Threshold must be non-negative, got {self.epsilon}")
        if self.estimator not in ESTIMATORS:
            raise CateWatchError(f"Unknown estimator '{self.estimator}'; choose from {ESTIMATORS}")
        if self.eval_policy not in EVAL_POLICIES:
            raise CateWatchError(f"Unknown evaluation policy '{self.eval_policy}'")
        if self.eval_policy == "fixed-grid":
            if self.grid_points is None:
                raise CateWatchError("The fixed-grid policy needs grid_points")
            object.__setattr__(self, "grid_points", np.atleast_2d(np.asarray(self.grid_points, dtype=float)))

    def with_changes(self, **changes) -> "DetectorConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Alert:
    """Alarm raised at time delta_hat over the window (t - 2w, t]"""
    delta_hat: int
    statistic: float
    argmax_point: tuple
    window_range: tuple

    def to_dict(self) -> dict:
        return {
            "delta_hat": int(self.delta_hat),
            "statistic": float(self.statistic),
            "argmax_x": [float(v) for v in self.argmax_point],
            "window": [int(self.window_range[0]), int(self.window_range[1])],
        }


@dataclass(frozen=True)
class RanToEnd:
    """The stream ended without an alarm"""
    t_last: int | None


class StatisticResult(NamedTuple):
    value: float
    argmax_point: tuple
    evaluated: int
    skipped: int


@dataclass
class _Buffered:
    batch: TimeBatch
    y_hat: np.ndarray | None


@dataclass
class DetectorState:
    """Rolling buffer and alarm status; owned by a single stream consumer"""
    buffer: deque
    t_now: int | None = None
    alarmed: bool = False
    last_statistic: float | None = None
    argmax_point: tuple | None = None


# =====================================================
# STATISTIC
# =====================================================

def _stack(entries):
    y = np.concatenate([e.batch.y for e in entries])
    X = np.vstack([e.batch.x for e in entries])
    z = np.concatenate([e.batch.z for e in entries]).astype(float)
    y_hat = np.concatenate([e.y_hat for e in entries]) if entries[0].y_hat is not None else None
    return y, X, z, y_hat


def _half_estimates(entries, config: DetectorConfig, points):
    y, X, z, y_hat = _stack(entries)
    if config.estimator == "one-k":
        return nw_cate_arrays(y_hat, X, config.kernel, config.h, points)
    estimate, mass_treated, mass_control = dk_cate_arrays(y, X, z, config.kernel, config.h, points)
    return estimate, mass_treated & mass_control


def window_statistic(older, newer, config: DetectorConfig) -> StatisticResult:
    """
    Maximal absolute discrepancy between the two half-window estimates

    Args:
        older: buffered entries for (t - 2w, t - w]
        newer: buffered entries for (t - w, t]
        config: detector configuration

    Returns:
        StatisticResult: value, argmax point, evaluated and skipped counts

    Raises:
        AllPointsSkipped: no evaluation point has mass in both halves
        DimensionMismatch: the grid points and the buffered covariates differ in d
    """
    if config.eval_policy == "current-window":
        points = np.vstack([e.batch.x for e in list(older) + list(newer)])
    else:
        points = config.grid_points
        d = older[0].batch.d
        if points.shape[1] != d:
            raise DimensionMismatch(points.shape[1], d)

    estimate_old, mass_old = _half_estimates(older, config, points)
    estimate_new, mass_new = _half_estimates(newer, config, points)
    valid = mass_old & mass_new
    evaluated = int(valid.sum())
    skipped = len(valid) - evaluated
    if evaluated == 0:
        raise AllPointsSkipped(f"All {len(valid)} evaluation points lack kernel mass")
    if skipped:
        logger.debug(f"Skipped {skipped} evaluation points without kernel mass")

    discrepancy = np.where(valid, np.abs(estimate_old - estimate_new), -np.inf)
    index = int(np.argmax(discrepancy))
    return StatisticResult(float(discrepancy[index]), tuple(float(v) for v in points[index]), evaluated, skipped)


# =====================================================
# DETECTOR
# =====================================================

class OnlineDetector:
    """Single-stream detector; feed batches in time order with push()"""

    def __init__(self, config: DetectorConfig):
        self.config = config
        self.state = DetectorState(buffer=deque(maxlen=2 * config.w))

    def reset(self):
        """Clear the buffer and the alarm flag"""
        self.state = DetectorState(buffer=deque(maxlen=2 * self.config.w))

    @property
    def full(self) -> bool:
        return len(self.state.buffer) == 2 * self.config.w

    def _check_batch(self, batch: TimeBatch):
        state = self.state
        if state.alarmed:
            raise AlreadyAlarmed(f"Detector alarmed at t={state.t_now}; reset() before pushing more data")
        if state.t_now is not None and batch.t != state.t_now + 1:
            raise NonContiguousTime(batch.t, state.t_now + 1)
        if not batch.n:
            raise EmptyPeriod(batch.t)
        subject = int(batch.subjects[0])
        if state.buffer and batch.d != state.buffer[-1].batch.d:
            raise DimensionMismatch(batch.d, state.buffer[-1].batch.d, t=batch.t, subject=subject)
        grid = self.config.grid_points
        if self.config.eval_policy == "fixed-grid" and grid.shape[1] != batch.d:
            raise DimensionMismatch(grid.shape[1], batch.d, t=batch.t, subject=subject)

    def push(self, batch: TimeBatch) -> Alert | None:
        """
        Ingest the next batch

        Args:
            batch: batch with t = t_now + 1

        Returns:
            Alert if the statistic reached epsilon, otherwise None

        Raises:
            NonContiguousTime, AlreadyAlarmed, EmptyPeriod, DimensionMismatch:
            the batch is rejected and the buffer is unchanged
            AllPointsSkipped: the batch is already buffered and t_now has
            advanced, so the next push continues with t + 1
        """
        self._check_batch(batch)
        state = self.state

        batch = batch.sorted_by_subject()
        y_hat = None
        if self.config.estimator == "one-k":
            y_hat = transformed_outcomes(batch.y, batch.z, predict_many(self.config.propensity, batch.x))
        state.buffer.append(_Buffered(batch, y_hat))
        state.t_now = batch.t

        if not self.full:
            return None

        state.last_statistic = state.argmax_point = None
        result = self.statistic()
        state.last_statistic = result.value
        state.argmax_point = result.argmax_point
        logger.debug(f"t={batch.t}: statistic={result.value:.6f}")

        if result.value >= self.config.epsilon:
            state.alarmed = True
            alert = Alert(
                delta_hat=batch.t,
                statistic=result.value,
                argmax_point=result.argmax_point,
                window_range=(batch.t - 2 * self.config.w, batch.t),
            )
            logger.info(f"Alarm at t={batch.t}: statistic {result.value:.4f} >= epsilon {self.config.epsilon:.4f}")
            return alert
        return None

    def statistic(self) -> StatisticResult:
        """Statistic over the current buffer; needs exactly 2w batches"""
        if not self.full:
            raise BufferNotFull(f"Buffer holds {len(self.state.buffer)} of {2 * self.config.w} batches")
        entries = list(self.state.buffer)
        w = self.config.w
        return window_statistic(entries[:w], entries[w:], self.config)


def run_stream(batches: Sequence[TimeBatch], config: DetectorConfig) -> Alert | RanToEnd:
    """
    Feed a stream to a fresh detector

    Returns:
        Alert: the first alarm, or RanToEnd(t_last) when none fires
    """
    detector = OnlineDetector(config)
    for batch in batches:
        alert = detector.push(batch)
        if alert is not None:
            return alert
    return RanToEnd(detector.state.t_now)


def statistic_path(batches: Sequence[TimeBatch], config: DetectorConfig):
    """
    Statistic at every time the buffer is full, ignoring the threshold

    Returns:
        tuple: (times, values) arrays; values are NaN where every evaluation
        point was skipped
    """
    detector = OnlineDetector(config.with_changes(epsilon=math.inf))
    times, values = [], []
    for batch in batches:
        try:
            detector.push(batch)
        except AllPointsSkipped:
            logger.warning(f"No evaluation point had kernel mass at t={batch.t}")
            times.append(batch.t)
            values.append(np.nan)
            continue
        if detector.full:
            times.append(batch.t)
            values.append(detector.state.last_statistic)
    return np.asarray(times, dtype=np.int64), np.asarray(values, dtype=float)


def first_alarm(times, values, epsilon):
    """First time whose statistic reaches epsilon, or None"""
    hits = np.flatnonzero(np.asarray(values) >= epsilon)
    return int(times[hits[0]]) if hits.size else None


def alarms_with_restart(times, values, epsilon, w):
    """
    Alarm times when the detector is reset after every alarm

    A reset detector needs 2w fresh batches before its next statistic, so
    after an alarm at t the scan resumes at t + 2w. Statistics only read the
    last 2w batches, which makes a restarted run a suffix of the same path.
    """
    alarms = []
    ready = -math.inf
    for t, value in zip(times, values):
        if t >= ready and value >= epsilon:
            alarms.append(int(t))
            ready = t + 2 * w
    return alarms
