"""Shared fixtures-by-hand for the test modules."""

import math

import numpy as np

from memgan.memory import MemoryParams, MemoryState


def make_state(keys, values, hist, ages=None, **params):
    keys = np.asarray(keys, dtype=np.float64)
    n = len(keys)
    return MemoryState(
        keys=keys,
        values=np.asarray(values, dtype=np.int8),
        ages=np.zeros(n, dtype=np.int64) if ages is None else np.asarray(ages, dtype=np.int64),
        histogram=np.asarray(hist, dtype=np.float64),
        params=MemoryParams(**params),
    )


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_state(rng, n, m, written_frac=1.0, **params):
    keys = rng.standard_normal((n, m))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    keys[rng.random(n) >= written_frac] = 0.0
    return make_state(keys, rng.integers(0, 2, n), rng.uniform(0.0, 5.0, n),
                      rng.integers(0, 20, n), **params)


def exhaustive_marginal(keys, values, hist, q, kappa, beta):
    # direct sum of the joint, written independently of the library
    num = den = 0.0
    for key, v, h in zip(keys, values, hist):
        joint = math.exp(kappa * float(np.dot(key, q))) * (h + beta)
        num += v * joint
        den += joint
    return num / den


# acceptance criterion name -> (passed, detail); printed by the terminal summary hook
ACCEPTANCE: dict = {}


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(passed), detail)
