"""
Propensity Score Models
=======================
Known propensity functions, the pooled constant estimator, and the logistic
maximum-likelihood estimator fitted by damped Newton iterations. Every
prediction is clipped to [clip, 1 - clip] so downstream inverse weighting never
divides by a value outside (0, 1).

The logistic likelihood follows the printed form without an intercept;
with_intercept appends a constant-1 covariate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from utils.model import (
    CateWatchError,
    DimensionMismatch,
    EmptyData,
    NoConvergence,
    Separation,
    TimeBatch,
)

logger = logging.getLogger(__name__)

VARIANTS = ("known", "constant", "logistic")

DEFAULT_CLIP = 0.01
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
DEFAULT_MAX_HALVINGS = 30
DEFAULT_BETA_CAP = 30.0
SEPARATION_RESIDUAL = 1e-6
LL_SLACK = 1e-12


@dataclass(frozen=True)
class PropensityModel:
    """
    Propensity model pi-hat(x)

    Attributes:
        variant: 'known', 'constant' or 'logistic'
        clip: predictions are clipped to [clip, 1 - clip]
        p: constant propensity (constant variant, stored after clipping)
        beta: logistic coefficients (intercept last when with_intercept)
        with_intercept: logistic model carries an appended constant covariate
        func: vectorised known propensity, (N, d) array -> (N,) array
        d: covariate dimension, required for the known variant and implied by beta
    """
    variant: str
    clip: float = DEFAULT_CLIP
    p: float | None = None
    beta: tuple | None = None
    with_intercept: bool = False
    func: Callable | None = None
    d: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise CateWatchError(f"Unknown propensity variant '{self.variant}'")
        if not 0.0 < self.clip < 0.5:
            raise CateWatchError(f"Clip must lie in (0, 0.5), got {self.clip}")
        if self.variant == "constant":
            if self.p is None:
                raise CateWatchError("Constant propensity needs p")
            object.__setattr__(self, "p", _clip(float(self.p), self.clip))
        elif self.variant == "logistic":
            if self.beta is None:
                raise CateWatchError("Logistic propensity needs beta")
            beta = tuple(float(b) for b in self.beta)
            if not np.all(np.isfinite(beta)):
                raise CateWatchError(f"Logistic coefficients must be finite: {beta}")
            object.__setattr__(self, "beta", beta)
            object.__setattr__(self, "d", len(beta) - (1 if self.with_intercept else 0))
        else:
            if self.func is None:
                raise CateWatchError("Known propensity needs a function")
            if self.d is None or int(self.d) != self.d or self.d < 1:
                raise CateWatchError(f"Known propensity needs its covariate dimension d >= 1, got {self.d}")

    # =====================================================
    # SERIALIZATION
    # =====================================================

    def to_dict(self) -> dict:
        if self.variant == "known":
            raise CateWatchError("Known propensity functions cannot be serialised")
        document = {"variant": self.variant, "clip": self.clip, "with_intercept": self.with_intercept}
        if self.variant == "constant":
            document["p"] = self.p
        else:
            document["beta"] = list(self.beta)
        return document

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, document: dict) -> "PropensityModel":
        variant = document["variant"]
        clip = float(document.get("clip", DEFAULT_CLIP))
        if variant == "constant":
            return cls("constant", clip=clip, p=float(document["p"]))
        if variant == "logistic":
            return cls(
                "logistic",
                clip=clip,
                beta=tuple(document["beta"]),
                with_intercept=bool(document.get("with_intercept", False)),
            )
        raise CateWatchError(f"Cannot load propensity variant '{variant}' from JSON")

    @classmethod
    def from_json(cls, text: str) -> "PropensityModel":
        return cls.from_dict(json.loads(text))


def _clip(p, clip):
    return np.minimum(np.maximum(p, clip), 1.0 - clip)


def constant_model(p, clip=DEFAULT_CLIP) -> PropensityModel:
    return PropensityModel("constant", clip=clip, p=p)


def known_model(func, d, clip=DEFAULT_CLIP) -> PropensityModel:
    return PropensityModel("known", clip=clip, func=func, d=d)


def logistic_model(beta, with_intercept=False, clip=DEFAULT_CLIP) -> PropensityModel:
    return PropensityModel("logistic", clip=clip, beta=tuple(beta), with_intercept=with_intercept)


# =====================================================
# PREDICTION
# =====================================================

def predict_many(model: PropensityModel, X) -> np.ndarray:
    """Clipped propensities for every row of X"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if model.d is not None and X.shape[1] != model.d:
        raise DimensionMismatch(X.shape[1], model.d)

    if model.variant == "constant":
        return np.full(X.shape[0], model.p)
    if model.variant == "logistic":
        beta = np.asarray(model.beta)
        eta = X @ beta[: X.shape[1]]
        if model.with_intercept:
            eta = eta + beta[-1]
        return _clip(expit(eta), model.clip)
    values = np.asarray(model.func(X), dtype=float).reshape(X.shape[0])
    return _clip(values, model.clip)


def predict(model: PropensityModel, x) -> float:
    """Clipped propensity pi-hat(x) for a single covariate vector"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(predict_many(model, x[None, :])[0])


# =====================================================
# FITTING
# =====================================================

def _stack(data: Sequence[TimeBatch]):
    batches = [b for b in data if b.n]
    if not batches:
        raise EmptyData("Propensity fitting needs at least one observation")
    X = np.vstack([b.x for b in batches])
    z = np.concatenate([b.z for b in batches]).astype(float)
    return X, z


def fit_constant(data: Sequence[TimeBatch], clip=DEFAULT_CLIP) -> PropensityModel:
    """
    Pooled constant propensity: the treated fraction over every observation

    Args:
        data: time batches
        clip: overlap clip

    Returns:
        PropensityModel: constant variant
    """
    _, z = _stack(data)
    model = constant_model(float(z.mean()), clip=clip)
    logger.debug(f"Fitted constant propensity p={model.p:.4f} on {z.size} observations")
    return model


def log_likelihood(beta, X, z) -> float:
    """Logistic log-likelihood sum(z * x'b - log(1 + exp(x'b)))"""
    eta = X @ np.asarray(beta, dtype=float)
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def design_matrix(X, with_intercept):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if with_intercept:
        return np.hstack([X, np.ones((X.shape[0], 1))])
    return X


def fit_logistic_arrays(
    X,
    z,
    with_intercept=False,
    tol=DEFAULT_TOL,
    max_iter=DEFAULT_MAX_ITER,
    clip=DEFAULT_CLIP,
    max_halvings=DEFAULT_MAX_HALVINGS,
    beta_cap=DEFAULT_BETA_CAP,
    trace=None,
) -> PropensityModel:
    """
    Logistic MLE by damped Newton iterations

    Args:
        X: (N, d) covariates
        z: (N,) treatment indicators
        with_intercept: append a constant-1 covariate
        tol: convergence when the gradient sup-norm is <= tol
        max_iter: Newton iteration budget
        clip: overlap clip for the returned model
        max_halvings: step-halving budget per iteration
        beta_cap: coefficients beyond this sup-norm signal separation
        trace: optional list receiving the log-likelihood after every accepted step

    Returns:
        PropensityModel: logistic variant

    Raises:
        Separation, NoConvergence
    """
    D = design_matrix(X, with_intercept)
    z = np.asarray(z, dtype=float)
    if D.shape[0] < D.shape[1]:
        raise EmptyData(f"Need at least {D.shape[1]} observations, got {D.shape[0]}")

    beta = np.zeros(D.shape[1])
    ll = log_likelihood(beta, D, z)
    if trace is not None:
        trace.append(ll)

    for iteration in range(max_iter + 1):
        mu = expit(D @ beta)
        gradient = D.T @ (z - mu)
        grad_norm = float(np.max(np.abs(gradient)))
        if np.max(np.abs(z - mu)) < SEPARATION_RESIDUAL:
            raise Separation(f"Fitted probabilities reproduce every label (|beta|={np.max(np.abs(beta)):.1f})")
        if grad_norm <= tol:
            logger.debug(f"Logistic propensity converged in {iteration} iterations: beta={np.round(beta, 4).tolist()}")
            return logistic_model(beta, with_intercept=with_intercept, clip=clip)
        if iteration == max_iter:
            raise NoConvergence(max_iter, grad_norm)

        hessian = D.T @ (D * (mu * (1.0 - mu))[:, None])
        try:
            step = linalg.solve(hessian, gradient, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hessian, gradient, rcond=None)[0]

        for _ in range(max_halvings + 1):
            candidate = beta + step
            ll_candidate = log_likelihood(candidate, D, z)
            # relative slack absorbs rounding once the increments fall below float resolution
            if ll_candidate >= ll - LL_SLACK * max(1.0, abs(ll)):
                break
            step = step / 2.0
        else:
            raise NoConvergence(iteration, grad_norm)

        beta, ll = candidate, ll_candidate
        if trace is not None:
            trace.append(ll)
        logger.debug(f"Newton iteration {iteration + 1}: loglik={ll:.10f}, grad={grad_norm:.3e}")

        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > beta_cap:
            raise Separation(f"Coefficients diverged beyond {beta_cap}: the classes are separable")

    raise NoConvergence(max_iter, grad_norm)


def fit_logistic(
    data: Sequence[TimeBatch],
    with_intercept=False,
    tol=DEFAULT_TOL,
    max_iter=DEFAULT_MAX_ITER,
    clip=DEFAULT_CLIP,
    **kwargs,
) -> PropensityModel:
    """Logistic propensity fitted on every observation of the given batches"""
    X, z = _stack(data)
    return fit_logistic_arrays(X, z, with_intercept=with_intercept, tol=tol, max_iter=max_iter, clip=clip, **kwargs)


# =====================================================
# WIRING
# =====================================================

@dataclass(frozen=True)
class PropensityPolicy:
    """
    How a detector run obtains pi-hat

    Attributes:
        kind: 'known', 'constant' or 'logistic'
        wiring: 'pooled' fits on the whole stream being monitored; 'burn-in'
            fits on the first burn_in periods and monitors only the rest
        burn_in: burn-in length in periods (defaults to 2w at resolve time)
        known: model used when kind == 'known'
    """
    kind: str = "constant"
    wiring: str = "pooled"
    burn_in: int | None = None
    clip: float = DEFAULT_CLIP
    with_intercept: bool = False
    known: PropensityModel | None = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise CateWatchError(f"Unknown propensity kind '{self.kind}'")
        if self.wiring not in ("pooled", "burn-in"):
            raise CateWatchError(f"Unknown propensity wiring '{self.wiring}'")
        if self.kind == "known" and self.known is None:
            raise CateWatchError("Known propensity policy needs a model")

    def resolve(self, batches: Sequence[TimeBatch], w: int):
        """
        Fit (or pick) the model for one stream

        Returns:
            tuple: (PropensityModel, batches to monitor)
        """
        batches = tuple(batches)
        if self.kind == "known":
            return self.known, batches

        if self.wiring == "burn-in":
            burn_in = self.burn_in if self.burn_in is not None else 2 * w
            training, monitored = batches[:burn_in], batches[burn_in:]
        else:
            training, monitored = batches, batches

        if self.kind == "constant":
            return fit_constant(training, clip=self.clip), monitored
        model = fit_logistic(
            training, with_intercept=self.with_intercept, tol=self.tol, max_iter=self.max_iter, clip=self.clip
        )
        return model, monitored
