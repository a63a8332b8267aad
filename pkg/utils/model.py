"""
Stream Model for CATE Watch
===========================
Domain types shared by every module: observations, time batches, stream
metadata, the error hierarchy, and stream validation.

A stream is a sequence of TimeBatch objects, one per period t = t0, t0+1, ...
Each batch is the cross-section of subjects observed at that period.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


# =====================================================
# ERRORS
# =====================================================

class CateWatchError(ValueError):
    """Base class for every domain error raised by the package"""


class NonContiguousTime(CateWatchError):
    def __init__(self, t, expected):
        self.t = t
        self.expected = expected
        super().__init__(f"Non-contiguous time index t={t} (expected t={expected})")


class DimensionMismatch(CateWatchError):
    def __init__(self, got, expected, t=None, subject=None):
        self.got = got
        self.expected = expected
        self.t = t
        self.subject = subject
        where = f" at t={t}, subject={subject}" if t is not None else ""
        super().__init__(f"Covariate dimension {got} does not match d={expected}{where}")


class DuplicateSubject(CateWatchError):
    def __init__(self, t, subject):
        self.t = t
        self.subject = subject
        super().__init__(f"Subject {subject} appears twice in batch t={t}")


class NonBinaryTreatment(CateWatchError):
    def __init__(self, t, subject, z):
        self.t = t
        self.subject = subject
        self.z = z
        super().__init__(f"Treatment z={z} is not in {{0, 1}} at t={t}, subject={subject}")


class NonFiniteValue(CateWatchError):
    def __init__(self, t, subject, name):
        self.t = t
        self.subject = subject
        self.name = name
        super().__init__(f"Non-finite {name} at t={t}, subject={subject}")


class EmptyPeriod(CateWatchError):
    def __init__(self, t):
        self.t = t
        super().__init__(f"Period t={t} holds no observations")


class MixedTimeIndex(CateWatchError):
    def __init__(self, t, other):
        self.t = t
        self.other = other
        super().__init__(f"Batch t={t} contains a row with t={other}")


class PropensityOutOfRange(CateWatchError):
    def __init__(self, p):
        self.p = p
        super().__init__(f"Propensity {p} is outside the open interval (0, 1)")


class NoMass(CateWatchError):
    """The query point has no kernel support in the window"""

    def __init__(self, x=None):
        self.x = x
        super().__init__(f"No kernel mass at query point {x}")


class NoGroupMass(CateWatchError):
    def __init__(self, group, x=None):
        self.group = group
        self.x = x
        super().__init__(f"No kernel mass in the {group} group at query point {x}")


class EmptyData(CateWatchError):
    pass


class Separation(CateWatchError):
    pass


class NoConvergence(CateWatchError):
    def __init__(self, max_iter, grad_norm):
        self.max_iter = max_iter
        self.grad_norm = grad_norm
        super().__init__(
            f"Newton iterations did not converge in {max_iter} steps "
            f"(gradient sup-norm {grad_norm:.3e})"
        )


class BufferNotFull(CateWatchError):
    pass


class AllPointsSkipped(CateWatchError):
    pass


class AlreadyAlarmed(CateWatchError):
    pass


class UnknownScenario(CateWatchError):
    pass


class DimensionTooSmall(CateWatchError):
    pass


class GridExhausted(CateWatchError):
    pass


class ReportError(CateWatchError):
    pass


# =====================================================
# DOMAIN TYPES
# =====================================================

@dataclass(frozen=True)
class Observation:
    """One subject's (y, x, z) record at time t"""
    t: int
    subject: int
    y: float
    x: tuple
    z: int


def _readonly(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TimeBatch:
    """
    Cross-section of subjects at one period, stored column-wise.

    Attributes:
        t: time index
        subjects: (n,) integer subject ids
        y: (n,) outcomes
        x: (n, d) covariates
        z: (n,) treatment indicators

    The arrays are read-only copies; rows keep the order they were given in.
    Construction does not validate; use validate_stream for that.
    """
    t: int
    subjects: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float)
        if x.ndim != 2:
            x = x.reshape(len(y), -1) if len(y) else np.empty((0, 0))
        object.__setattr__(self, "t", int(self.t))
        object.__setattr__(self, "subjects", _readonly(np.array(self.subjects, dtype=np.int64).reshape(-1)))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "z", _readonly(np.array(self.z)))

    @classmethod
    def from_rows(cls, t, rows: Sequence[Observation]) -> "TimeBatch":
        """Build a batch from Observation rows; rows from other periods are rejected"""
        for row in rows:
            if row.t != t:
                raise MixedTimeIndex(t, row.t)
        if not rows:
            return cls(t=t, subjects=[], y=[], x=np.empty((0, 0)), z=[])
        width = len(rows[0].x)
        for row in rows:
            if len(row.x) != width:
                raise DimensionMismatch(len(row.x), width, t=t, subject=row.subject)
        x = np.array([list(row.x) for row in rows], dtype=float).reshape(len(rows), width)
        return cls(
            t=t,
            subjects=[row.subject for row in rows],
            y=[row.y for row in rows],
            x=x,
            z=[row.z for row in rows],
        )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def rows(self) -> list:
        return [
            Observation(self.t, int(s), float(y), tuple(float(v) for v in x), int(z))
            for s, y, x, z in zip(self.subjects, self.y, self.x, self.z)
        ]

    def sorted_by_subject(self) -> "TimeBatch":
        """Rows re-ordered by subject id (the detector's scan order)"""
        order = np.argsort(self.subjects, kind="stable")
        if np.array_equal(order, np.arange(self.n)):
            return self
        return TimeBatch(self.t, self.subjects[order], self.y[order], self.x[order], self.z[order])

    def __eq__(self, other):
        if not isinstance(other, TimeBatch):
            return NotImplemented
        return (
            self.t == other.t
            and np.array_equal(self.subjects, other.subjects)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.z, other.z)
        )

    __hash__ = None


@dataclass(frozen=True)
class StreamMeta:
    """Declared stream shape; covariate domain defaults to the unit cube"""
    d: int
    n: int | None = None
    domain_lo: tuple = field(default=None)
    domain_hi: tuple = field(default=None)

    def __post_init__(self):
        if self.d < 1:
            raise DimensionTooSmall(f"Covariate dimension must be >= 1, got {self.d}")
        lo = tuple(self.domain_lo) if self.domain_lo is not None else (0.0,) * self.d
        hi = tuple(self.domain_hi) if self.domain_hi is not None else (1.0,) * self.d
        if len(lo) != self.d or len(hi) != self.d:
            raise DimensionMismatch(len(lo) if len(lo) != self.d else len(hi), self.d)
        if any(a >= b for a, b in zip(lo, hi)):
            raise CateWatchError(f"Domain bounds must satisfy lo < hi coordinate-wise: {lo} vs {hi}")
        object.__setattr__(self, "domain_lo", lo)
        object.__setattr__(self, "domain_hi", hi)


# =====================================================
# VALIDATION
# =====================================================

def _validate_batch(batch: TimeBatch, meta: StreamMeta):
    t = batch.t
    if not batch.n:
        raise EmptyPeriod(t)
    if batch.x.shape[1] != meta.d:
        raise DimensionMismatch(batch.x.shape[1], meta.d, t=t, subject=int(batch.subjects[0]))

    seen = set()
    for i in range(batch.n):
        subject = int(batch.subjects[i])
        if subject in seen:
            raise DuplicateSubject(t, subject)
        seen.add(subject)

        z = batch.z[i]
        if not (z == 0 or z == 1):
            raise NonBinaryTreatment(t, subject, z.item() if hasattr(z, "item") else z)
        if not np.isfinite(batch.y[i]):
            raise NonFiniteValue(t, subject, "outcome")
        if not np.all(np.isfinite(batch.x[i])):
            raise NonFiniteValue(t, subject, "covariate")

    lo = np.asarray(meta.domain_lo)
    hi = np.asarray(meta.domain_hi)
    outside = np.any((batch.x < lo) | (batch.x > hi), axis=1)
    if outside.any():
        logger.warning(f"{int(outside.sum())} covariate rows outside the declared domain at t={t}")


def validate_stream(batches: Iterable[TimeBatch], meta: StreamMeta) -> tuple:
    """
    Validate a stream of batches

    Args:
        batches: time batches in stream order
        meta: declared stream metadata

    Returns:
        tuple: the same batch objects, unchanged

    Raises:
        NonContiguousTime, EmptyPeriod, DimensionMismatch, DuplicateSubject,
        NonBinaryTreatment, NonFiniteValue: naming the first offending record
    """
    batches = tuple(batches)
    expected = None
    for batch in batches:
        if expected is not None and batch.t != expected:
            raise NonContiguousTime(batch.t, expected)
        _validate_batch(batch, meta)
        expected = batch.t + 1

    logger.debug(f"Validated {len(batches)} batches (d={meta.d})")
    return batches
