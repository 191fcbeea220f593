import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrlab.data import MISSING, CaseRecord, Cohort, StudyDesign, Variant, make_dataset
from attrlab.errors import IncompleteLatent
from attrlab.likelihood import (CompletionTable, ParameterVector, bernoulli_loglik, joint_loglik,
                                latent_full_conditional, loglik_gradient, observed_loglik)
from attrlab.model import Term, default_an_spec
from attrlab.sim import TABLE1_TRUTH, two_wave_an

from conftest import chain_logprob, expit, two_wave

M = MISSING
TWO = StudyDesign.from_variant(Variant.TwoWave)


def test_bernoulli_loglik_values():
    assert bernoulli_loglik(1, 0.0) == pytest.approx(math.log(0.5), abs=1e-12)
    assert bernoulli_loglik(0, 0.0) == pytest.approx(-0.693147, abs=1e-6)
    assert bernoulli_loglik(1, 0.3) == pytest.approx(-0.554355, abs=1e-6)


def test_bernoulli_loglik_overflow_safe():
    assert np.isfinite(bernoulli_loglik(0, 800.0))
    assert bernoulli_loglik(1, 800.0) == pytest.approx(0.0)
    assert bernoulli_loglik(0, -800.0) == pytest.approx(0.0)


def test_joint_loglik_all_zero():
    ds = two_wave([("Panel", 1, 1, 1)])
    spec = default_an_spec(TWO)
    assert joint_loglik(ds, spec, ParameterVector.zeros(spec)) == pytest.approx(-2.079442, abs=1e-6)


def test_joint_loglik_empty():
    ds = two_wave([])
    spec = default_an_spec(TWO)
    assert joint_loglik(ds, spec, ParameterVector.zeros(spec)) == 0.0


def test_incomplete_latent():
    ds = two_wave([("Panel", 1, None, 0)])
    spec = default_an_spec(TWO)
    with pytest.raises(IncompleteLatent):
        joint_loglik(ds, spec, ParameterVector.zeros(spec))


def test_marginalizing_one_latent_cell():
    ds = two_wave([("Panel", 1, None, 0)], x=[[1.0]])
    spec = two_wave_an()
    theta = ParameterVector.from_dict(spec, TABLE1_TRUTH)
    parts = []
    for v in (0, 1):
        lat = np.full((1, 3), M, dtype=np.int8)
        lat[0, TWO.index("Y2")] = v
        parts.append(joint_loglik(ds, spec, theta, lat))
    assert observed_loglik(ds, spec, theta) == pytest.approx(np.logaddexp(*parts), abs=1e-12)


def test_completions_sum_to_one_in_any_order():
    spec = two_wave_an()
    theta = ParameterVector.from_dict(spec, TABLE1_TRUTH)
    cells = list(itertools.product([0, 1], repeat=3))
    probs = []
    for y1, y2, w1 in cells:
        ds = make_dataset(TWO, [Cohort.Panel], [[1.0]], [[y1, y2 if w1 else M, w1]], covariate_names=("X",))
        lat = np.full((1, 3), M, dtype=np.int8)
        if not w1:
            lat[0, 1] = y2
        probs.append(math.exp(joint_loglik(ds, spec, theta, lat)))
    assert sum(probs) == pytest.approx(1.0, abs=1e-12)
    assert sum(reversed(probs)) == pytest.approx(sum(probs), abs=1e-15)


def test_gradient_single_block():
    ds = two_wave([("R1", None, 1, None)])
    spec = default_an_spec(TWO)
    lat = np.array([[0, M, 0]], dtype=np.int8)
    g = loglik_gradient(ds, spec, ParameterVector.zeros(spec), lat)
    # Y1 block: (0 - 0.5) * 1 ; Y2 intercept: (1 - 0.5)
    assert g[0] == pytest.approx(-0.5)
    assert g[1] == pytest.approx(0.5)


def test_gradient_omits_fixed_terms():
    spec = default_an_spec(TWO).with_fixed("W1", Term(("Y1", "Y2")), 0.7)
    ds = two_wave([("Panel", 1, 1, 1)])
    g = loglik_gradient(ds, spec, ParameterVector.zeros(spec))
    assert len(g) == len(spec.param_names()) == 6


rows = st.sampled_from([("Panel", 1, 1, 1), ("Panel", 0, 1, 1), ("Panel", 1, None, 0), ("Panel", 0, None, 0),
                        ("R1", None, 1, None), ("R1", None, 0, None)])


@settings(max_examples=40, deadline=None)
@given(st.lists(rows, min_size=1, max_size=6), st.integers(0, 2 ** 31 - 1))
def test_gradient_matches_finite_differences(case_rows, seed):
    rng = np.random.default_rng(seed)
    ds = two_wave(case_rows, x=rng.integers(0, 2, len(case_rows)).reshape(-1, 1).astype(float))
    spec = two_wave_an().with_fixed("W1", Term(("Y1", "Y2")), 0.4)
    lat = np.where(ds.values == M, rng.integers(0, 2, ds.values.shape), M).astype(np.int8)
    flat = rng.normal(0, 1, len(spec.param_names()))
    g = loglik_gradient(ds, spec, ParameterVector.from_flat(spec, flat), lat)
    h = 1e-5
    fd = np.empty_like(flat)
    for j in range(len(flat)):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        fd[j] = (joint_loglik(ds, spec, ParameterVector.from_flat(spec, up), lat)
                 - joint_loglik(ds, spec, ParameterVector.from_flat(spec, dn), lat)) / (2 * h)
    scale = np.maximum(np.abs(g), 1.0)
    assert np.max(np.abs(g - fd) / scale) < 1e-6


def test_dropout_symmetry():
    spec = default_an_spec(TWO)
    case = CaseRecord("p", Cohort.Panel, (), (1, M), (0,))
    lc = latent_full_conditional(case, spec, ParameterVector.zeros(spec))
    assert lc.variables == ("Y2",)
    assert lc.as_dict() == {(0,): pytest.approx(0.5), (1,): pytest.approx(0.5)}


def test_refreshment_uniform_at_zero():
    spec = default_an_spec(TWO)
    case = CaseRecord("r", Cohort.R1, (), (M, 1), (M,))
    lc = latent_full_conditional(case, spec, ParameterVector.zeros(spec))
    assert lc.variables == ("Y1", "W1")
    assert np.allclose(lc.probs, 0.25, atol=1e-15)


def test_refreshment_table1_against_joint_table():
    spec = two_wave_an()
    theta = ParameterVector.from_dict(spec, TABLE1_TRUTH)
    # eight-cell joint at X=1 written out directly
    p1 = expit(0.3 - 0.4)
    joint = {}
    for y1, y2, w1 in itertools.product([0, 1], repeat=3):
        p2 = expit(0.3 - 0.3 + 0.7 * y1)
        pw = expit(-0.4 + 1.0 - 0.7 * y1 + 1.3 * y2)
        joint[y1, y2, w1] = ((p1 if y1 else 1 - p1) * (p2 if y2 else 1 - p2) * (pw if w1 else 1 - pw))
    den = sum(v for (a, b, c), v in joint.items() if b == 1)
    case = CaseRecord("r", Cohort.R1, (1.0,), (M, 1), (M,))
    got = latent_full_conditional(case, spec, theta, ("X",)).as_dict()
    for (y1, w1), p in got.items():
        assert p == pytest.approx(joint[y1, 1, w1] / den, abs=1e-12)


THREE_CASES = [
    (Cohort.Panel, (1, M, M), (0, M)),
    (Cohort.Panel, (0, M, 1), (0, 1)),
    (Cohort.Panel, (1, 1, M), (1, 0)),
    (Cohort.R1, (M, 0, M), (M, M)),
    (Cohort.R2, (M, M, 1), (M, M)),
]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(Variant)[1:]), st.sampled_from(THREE_CASES), st.integers(0, 2 ** 31 - 1))
def test_latent_conditional_matches_enumeration(variant, case_spec, seed):
    rng = np.random.default_rng(seed)
    design = StudyDesign.from_variant(variant)
    spec = default_an_spec(design, ["X"])
    theta = ParameterVector.from_flat(spec, rng.normal(0, 1.5, len(spec.param_names())))
    cohort, y, w = case_spec
    x = float(rng.integers(0, 2))
    case = CaseRecord("c", cohort, (x,), y, w)
    lc = latent_full_conditional(case, spec, theta, ("X",))
    observed = dict(zip(("Y1", "Y2", "Y3"), y)) | dict(zip(("W1", "W2"), w))
    missing = [v for v in design.chain if observed[v] == M]
    assert set(lc.variables) == set(missing) and len(missing) <= 4
    logs = {}
    for combo in itertools.product([0, 1], repeat=len(missing)):
        full = dict(observed) | dict(zip(missing, combo))
        logs[tuple(full[v] for v in lc.variables)] = chain_logprob(spec, theta, {"X": x}, full)
    top = max(logs.values())
    z = sum(math.exp(v - top) for v in logs.values())
    for combo, p in lc.as_dict().items():
        assert p == pytest.approx(math.exp(logs[combo] - top) / z, abs=1e-10)


def test_grouped_draws_match_enumeration():
    spec = two_wave_an()
    theta = ParameterVector.from_dict(spec, TABLE1_TRUTH)
    ds = two_wave([("R1", None, 1, None), ("Panel", 1, None, 0), ("R1", None, 1, None)], x=[[1], [0], [1]])
    table = CompletionTable.for_imputation(ds, spec)
    logp, _ = table.group_logprob(table.row_loglik(theta))
    rng = np.random.default_rng(5)
    n = 20000
    case = CaseRecord("r", Cohort.R1, (1.0,), (M, 1), (M,))
    exact = latent_full_conditional(case, spec, theta, ("X",))
    hits = np.zeros(len(exact.probs))
    for _ in range(n):
        vals = table.sample_cases(rng, logp)
        y1, w1 = vals[0, 0], vals[0, 2]
        k = [tuple(c) for c in exact.completions.tolist()].index((y1, w1))
        hits[k] += 1
    freq = hits / n
    se = np.sqrt(exact.probs * (1 - exact.probs) / n)
    assert np.all(np.abs(freq - exact.probs) < 3 * se + 1e-12)
    w = np.zeros(table.n_rows)
    for _ in range(2000):
        w += table.sample_weights(rng, logp)
    assert w.sum() == pytest.approx(2000 * 3)
