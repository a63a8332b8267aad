"""
Shared fixtures for the CATE Watch test suites
"""

import os
import sys

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from utils.model import TimeBatch


def _batch(t, y, x, z, subjects=None):
    y = np.asarray(y, dtype=float)
    if subjects is None:
        subjects = np.arange(1, len(y) + 1)
    return TimeBatch(t=t, subjects=subjects, y=y, x=np.asarray(x, dtype=float).reshape(len(y), -1), z=np.asarray(z))


@pytest.fixture
def make_batch():
    """make_batch(t, y, x, z, subjects=None) -> TimeBatch"""
    return _batch


@pytest.fixture
def jump_stream():
    """
    Noiseless two-subject stream with a CATE step of size kappa after delta

    Every period holds a treated subject with y = kappa * 1{t > delta} and a
    control subject with y = 0, both at the same covariate point. Under a
    known propensity of 0.5 the statistic at t = delta + k (k <= w) is k * kappa / w.
    """

    def build(T=40, delta=20, kappa=1.0, d=3, point=0.5, start=1):
        x = np.full((2, d), point)
        return [
            _batch(t, [kappa if t > delta else 0.0, 0.0], x, [1, 0])
            for t in range(start, start + T)
        ]

    return build


@pytest.fixture
def random_stream():
    """Seeded stream of T periods with n subjects, d covariates and mixed treatment"""

    def build(T=8, n=5, d=2, seed=0, start=1):
        rng = np.random.default_rng(seed)
        batches = []
        for t in range(start, start + T):
            z = np.zeros(n, dtype=np.int64)
            z[: max(1, n // 2)] = 1
            batches.append(_batch(t, rng.normal(size=n), rng.random((n, d)), rng.permutation(z)))
        return batches

    return build


@pytest.fixture
def zero_source():
    """No-change source of all-zero outcomes: source(replicate, length) -> batches"""

    def source(replicate, length):
        rng = np.random.default_rng(replicate)
        return [
            _batch(t, np.zeros(4), rng.random((4, 2)), [1, 0, 1, 0])
            for t in range(1, length + 1)
        ]

    return source
