import math

import numpy as np
import pytest

from attrlab.data import MISSING, StudyDesign, Variant, make_dataset

TWO = StudyDesign.from_variant(Variant.TwoWave)
M = MISSING


def two_wave(rows, x=None):
    """rows: (cohort, y1, y2, w1) with None for missing."""
    cohort = [r[0] for r in rows]
    vals = np.array([[M if v is None else v for v in r[1:]] for r in rows], dtype=np.int8).reshape(-1, 3)
    x = np.zeros((len(rows), 0)) if x is None else np.asarray(x, float).reshape(len(rows), -1)
    names = () if x.shape[1] == 0 else tuple(f"X{i}" if i else "X" for i in range(x.shape[1]))
    return make_dataset(TWO, cohort, x, vals, covariate_names=names)


def expit(v):
    return 1.0 / (1.0 + math.exp(-v))


def chain_logprob(spec, theta, x, full):
    """Hand evaluation of log P(chain values | x), one conditional at a time."""
    env = dict(x) | dict(full)
    total = 0.0
    for m in spec.chain:
        eta = 0.0
        for t, b in zip(m.terms, theta.blocks[m.response]):
            eta += b * math.prod(env[f] for f in t.factors)
        for t, v in m.fixed.items():
            eta += v * math.prod(env[f] for f in t.factors)
        p = expit(eta)
        total += math.log(p if env[m.response] == 1 else 1 - p)
    return total


@pytest.fixture
def two_wave_factory():
    return two_wave
