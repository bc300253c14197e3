import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_sample(y, s, z=None, n_levels=None):
    from nfcausal.data import TreatmentSample
    return TreatmentSample(np.asarray(y, float), np.asarray(s), z=z,
                           n_levels=n_levels)


def brute_euclidean(x, i, j):
    t = x.shape[0]
    acc = 0.0
    for row in range(t):
        acc += (x[row, i] - x[row, j]) ** 2
    return np.sqrt(acc) / np.sqrt(t)


def brute_pseudo_max(x, i, j):
    t, n = x.shape
    best = 0.0
    for l in range(n):
        if l in (i, j):
            continue
        acc = 0.0
        for row in range(t):
            acc += (x[row, i] - x[row, j]) * x[row, l]
        best = max(best, abs(acc) / t)
    return best
