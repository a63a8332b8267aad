"""
Kernels and Nadaraya-Watson CATE Estimators
===========================================
Kernel families (bounded, integrable, compact families vanish outside the
support radius) and the two window estimators of the CATE function:

- One-K: a single kernel regression of the IPW-transformed outcome
  Y * (Z / pi(X) - (1 - Z) / (1 - pi(X))), whose conditional mean is the CATE.
- DK / Two-K: the difference of two group-wise kernel regressions of Y on the
  treated and on the control subjects.

Estimators work on relative weights: every row of the weight matrix is rescaled
so that its largest entry is 1 (Gaussian weights are formed in log space).
Ratio estimators are unchanged by a per-row factor, and tiny bandwidths no
longer underflow to an all-zero row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from utils.model import (
    CateWatchError,
    EmptyData,
    NoGroupMass,
    NoMass,
    PropensityOutOfRange,
    TimeBatch,
)

logger = logging.getLogger(__name__)

KERNEL_FAMILIES = ("gaussian", "epanechnikov-product", "boxcar", "truncated-triangular")
COMPACT_FAMILIES = ("epanechnikov-product", "boxcar", "truncated-triangular")


@dataclass(frozen=True)
class KernelSpec:
    """
    Kernel family and parameters

    Attributes:
        family: one of KERNEL_FAMILIES
        support_radius: L, used by the compactly supported families
        scale: constant multiplier c > 0 (estimators are invariant to it)
    """
    family: str = "gaussian"
    support_radius: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise CateWatchError(f"Unknown kernel family '{self.family}'; choose from {KERNEL_FAMILIES}")
        if not self.support_radius > 0:
            raise CateWatchError(f"Support radius must be positive, got {self.support_radius}")
        if not self.scale > 0:
            raise CateWatchError(f"Kernel scale must be positive, got {self.scale}")

    @property
    def compact(self) -> bool:
        return self.family in COMPACT_FAMILIES


# =====================================================
# KERNEL EVALUATION
# =====================================================

def _coordinate_profile(family, a, radius):
    """Per-coordinate density for the product families; a = |u_j| >= 0"""
    inside = a <= radius
    if family == "boxcar":
        return np.where(inside, 1.0 / (2.0 * radius), 0.0)
    if family == "epanechnikov-product":
        r = a / radius
        return np.where(inside, 0.75 * (1.0 - r * r) / radius, 0.0)
    # truncated-triangular
    return np.where(inside, (1.0 - a / radius) / radius, 0.0)


def kernel_eval(spec: KernelSpec, u) -> float:
    """
    Evaluate k(u)

    Args:
        spec: kernel specification
        u: real vector of length d

    Returns:
        float: kernel value; exactly 0 for compact families when ||u||_inf > L
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.all(np.isfinite(u)):
        raise CateWatchError("Kernel argument must be finite")
    d = u.size
    if spec.family == "gaussian":
        value = math.exp(-0.5 * float(np.dot(u, u))) * (2.0 * math.pi) ** (-d / 2.0)
    else:
        if np.max(np.abs(u)) > spec.support_radius:
            return 0.0
        value = float(np.prod(_coordinate_profile(spec.family, np.abs(u), spec.support_radius)))
    return spec.scale * value


def relative_weights(spec: KernelSpec, X, queries, h) -> np.ndarray:
    """
    Kernel weights k((X_j - q_i) / h), each row rescaled to a maximum of 1

    Args:
        spec: kernel specification
        X: (N, d) observation covariates
        queries: (m, d) query points
        h: bandwidth

    Returns:
        ndarray: (m, N) weights; a row is all zero when the query has no support
    """
    if not h > 0:
        raise CateWatchError(f"Bandwidth must be positive, got {h}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    if X.shape[0] == 0:
        return np.zeros((Q.shape[0], 0))

    if spec.family == "gaussian":
        log_w = -0.5 * cdist(Q, X, "sqeuclidean") / (h * h)
        log_w -= log_w.max(axis=1, keepdims=True)
        return np.exp(log_w)

    A = np.abs(Q[:, None, :] - X[None, :, :]) / h
    W = np.prod(_coordinate_profile(spec.family, A, spec.support_radius), axis=2)
    row_max = W.max(axis=1, keepdims=True)
    np.divide(W, row_max, out=W, where=row_max > 0)
    return W


def _ratio(W, values):
    # numpy reduces contiguous rows pairwise, which keeps long windows accurate
    numerator = np.sum(W * values[None, :], axis=1)
    denominator = np.sum(W, axis=1)
    mass = denominator > 0
    estimate = np.full(W.shape[0], np.nan)
    np.divide(numerator, denominator, out=estimate, where=mass)
    return estimate, mass


# =====================================================
# TRANSFORMED OUTCOMES
# =====================================================

def transformed_outcome(y, z, p) -> float:
    """Inverse-propensity transformed outcome y * (z/p - (1-z)/(1-p))"""
    if not 0.0 < p < 1.0:
        raise PropensityOutOfRange(p)
    return y * (z / p - (1 - z) / (1.0 - p))


def transformed_outcomes(y, z, p) -> np.ndarray:
    """Vectorised transformed_outcome"""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    p = np.broadcast_to(np.asarray(p, dtype=float), y.shape)
    bad = ~((p > 0.0) & (p < 1.0))
    if bad.any():
        raise PropensityOutOfRange(float(p[bad][0]))
    return y * (z / p - (1.0 - z) / (1.0 - p))


# =====================================================
# WINDOWS
# =====================================================

@dataclass(frozen=True)
class EstimateWindow:
    """Contiguous slice of batches covering the inclusive range [t_start, t_end]"""
    batches: tuple
    t_start: int
    t_end: int

    def __post_init__(self):
        object.__setattr__(self, "batches", tuple(self.batches))
        if self.t_end < self.t_start:
            raise CateWatchError(f"Empty window [{self.t_start}, {self.t_end}]")
        times = [b.t for b in self.batches]
        if times != list(range(self.t_start, self.t_end + 1)):
            raise CateWatchError(
                f"Window batches {times[:3]}... do not match [{self.t_start}, {self.t_end}]"
            )

    @classmethod
    def from_batches(cls, batches: Sequence[TimeBatch]) -> "EstimateWindow":
        batches = tuple(batches)
        if not batches:
            raise EmptyData("A window needs at least one batch")
        return cls(batches, batches[0].t, batches[-1].t)

    @property
    def width(self) -> int:
        return self.t_end - self.t_start + 1

    def stacked(self):
        """(y, X, z) over the window in scan order: time-major, subject-minor"""
        ordered = [b.sorted_by_subject() for b in self.batches if b.n]
        if not ordered:
            raise EmptyData(f"Window [{self.t_start}, {self.t_end}] holds no observations")
        y = np.concatenate([b.y for b in ordered])
        X = np.vstack([b.x for b in ordered])
        z = np.concatenate([b.z for b in ordered]).astype(float)
        return y, X, z


# =====================================================
# ESTIMATORS
# =====================================================

def nw_cate_arrays(y_hat, X, spec: KernelSpec, h, points):
    """
    One-K estimates from precomputed transformed outcomes

    Returns:
        tuple: (estimates, mass) arrays over the query points; estimates are NaN
        where mass is False
    """
    W = relative_weights(spec, X, points, h)
    return _ratio(W, np.asarray(y_hat, dtype=float))


def dk_cate_arrays(y, X, z, spec: KernelSpec, h_treated, points, h_control=None):
    """
    Group-wise difference estimates (treated mean minus control mean)

    Returns:
        tuple: (estimates, treated_mass, control_mass) over the query points
    """
    h_control = h_treated if h_control is None else h_control
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    treated = np.asarray(z) == 1
    m = np.atleast_2d(np.asarray(points, dtype=float)).shape[0]

    if treated.any():
        mean_1, mass_1 = _ratio(relative_weights(spec, X[treated], points, h_treated), y[treated])
    else:
        mean_1, mass_1 = np.full(m, np.nan), np.zeros(m, dtype=bool)
    if (~treated).any():
        mean_0, mass_0 = _ratio(relative_weights(spec, X[~treated], points, h_control), y[~treated])
    else:
        mean_0, mass_0 = np.full(m, np.nan), np.zeros(m, dtype=bool)
    return mean_1 - mean_0, mass_1, mass_0


def window_transformed_outcomes(window: EstimateWindow, prop):
    """Transformed outcomes for every observation in the window, in scan order"""
    from utils.propensity import predict_many

    y, X, z = window.stacked()
    return transformed_outcomes(y, z, predict_many(prop, X)), X


def nw_cate_many(window: EstimateWindow, prop, spec: KernelSpec, h, points):
    """One-K estimates at many query points; returns (estimates, mass)"""
    y_hat, X = window_transformed_outcomes(window, prop)
    return nw_cate_arrays(y_hat, X, spec, h, points)


def nw_cate(window: EstimateWindow, prop, spec: KernelSpec, h, x) -> float:
    """
    One-K CATE estimate at a single query point

    Args:
        window: estimation window
        prop: PropensityModel providing pi-hat
        spec: kernel specification
        h: bandwidth
        x: query point

    Returns:
        float: sum(Y_hat * k) / sum(k)

    Raises:
        NoMass: the kernel puts no weight on any observation near x
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    estimate, mass = nw_cate_many(window, prop, spec, h, x[None, :])
    if not mass[0]:
        raise NoMass(tuple(x))
    return float(estimate[0])


def dk_cate_many(window: EstimateWindow, spec: KernelSpec, h, points):
    y, X, z = window.stacked()
    return dk_cate_arrays(y, X, z, spec, h, points)


def dk_cate(window: EstimateWindow, spec: KernelSpec, h, x) -> float:
    """
    Difference-based kernel (DK) CATE estimate at a single query point

    Raises:
        NoGroupMass: the treated or control group has no kernel mass at x
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    estimate, mass_1, mass_0 = dk_cate_many(window, spec, h, x[None, :])
    if not mass_1[0]:
        raise NoGroupMass("treated", tuple(x))
    if not mass_0[0]:
        raise NoGroupMass("control", tuple(x))
    return float(estimate[0])


def two_k_cate(y, X, z, spec: KernelSpec, h_treated, h_control, points) -> np.ndarray:
    """Two-K estimator with separate treated / control bandwidths; NaN without group mass"""
    estimate, mass_1, mass_0 = dk_cate_arrays(y, X, z, spec, h_treated, points, h_control=h_control)
    return np.where(mass_1 & mass_0, estimate, np.nan)
