import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrlab.data import MISSING
from attrlab.diagnostics import (convergence_summary, odds_ratio_gloss, ppp, replicate_data, replicated_cells,
                                 sensitivity_scan, standard_checks, statistic_battery)
from attrlab.errors import TooFewDraws
from attrlab.likelihood import ParameterVector
from attrlab.model import Term
from attrlab.sampler import McmcConfig, PosteriorDraws, run_mwg
from attrlab.sim import generate, table1_generator, three_wave_generator, two_wave_an


def naive_ppp(s_d, s_r):
    below = above = 0
    for s in s_r:
        if s_d - s > 0:
            below += 1
        if s - s_d > 0:
            above += 1
    return (2 / len(s_r)) * min(below, above)


def draws_from(spec, rows):
    rows = np.atleast_2d(np.asarray(rows, float))
    return PosteriorDraws(spec.param_names(), rows[None, :, :], {})


def test_ppp_examples():
    assert ppp(2.5, [1, 2, 3, 4]) == 1.0
    assert ppp(5, [1, 2, 3, 4]) == 0.0
    assert ppp(1, [1, 1, 1]) == 0.0


stat = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(stat, st.lists(st.one_of(stat, st.integers(-3, 3).map(float)), min_size=1, max_size=40))
def test_ppp_matches_double_loop(s_d, s_r):
    assert ppp(s_d, s_r) == naive_ppp(s_d, s_r)
    assert 0.0 <= ppp(s_d, s_r) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(-1000, 1000), st.lists(st.integers(-1000, 1000), min_size=1, max_size=30))
def test_ppp_invariant_to_increasing_transform(s_d, s_r):
    for f in (lambda v: 3 * v + 7, lambda v: v ** 3 + v, lambda v: float(v) / 8 - 2):
        assert ppp(s_d, s_r) == ppp(f(s_d), [f(v) for v in s_r])


def test_ppp_uniformish_under_symmetry():
    rng = np.random.default_rng(0)
    # s_d exchangeable with the replicates: its rank is uniform, so ppp is too
    vals = [ppp(rng.normal(), rng.normal(size=51)) for _ in range(2000)]
    assert abs(np.mean(vals) - 0.5) < 3 * np.std(vals) / math.sqrt(len(vals))


@pytest.fixture(scope="module")
def fit_two_wave():
    ds = generate(table1_generator(seed=21, n_p=2000, n_r=1000))
    spec = two_wave_an()
    return ds, spec, run_mwg(ds, spec, McmcConfig(iterations=4000, seed=3))


def test_replicates_touch_only_replicated_cells(fit_two_wave):
    ds, spec, draws = fit_two_wave
    reps = replicate_data(draws, ds, spec, T=20, seed=1)
    mask = replicated_cells(ds)
    assert len(reps) == 20
    for r in reps:
        assert np.array_equal(r.values[~mask], ds.values[~mask])
        assert np.all(r.values[mask] != MISSING)
    assert any(not np.array_equal(r.values[mask], ds.values[mask]) for r in reps)


def test_degenerate_certain_outcome():
    ds = generate(table1_generator(seed=1, n_p=200, n_r=100))
    spec = two_wave_an()
    theta = dict.fromkeys(spec.param_names(), 0.0)
    theta["Y2~1"] = 60.0
    draws = draws_from(spec, [ParameterVector.from_dict(spec, theta).flat()] * 3)
    for r in replicate_data(draws, ds, spec, T=3):
        assert np.all(r.values[replicated_cells(ds)] == 1)


def test_replicated_refreshment_marginal_brackets_observed(fit_two_wave):
    ds, spec, draws = fit_two_wave
    reps = standard_checks(draws, ds, spec, T=200, seed=4)
    r1 = reps[0]
    assert r1.statistic_name == "Pr(Y2=0) in R1"
    assert min(r1.s_r) < r1.s_d < max(r1.s_r)
    assert all(r.ppp >= 0.05 for r in reps)


def test_misfixed_slope_flagged():
    ds = generate(table1_generator(seed=8, n_p=3000, n_r=1500))
    spec = two_wave_an().with_fixed("Y2", Term(("Y1",)), 0.0)
    draws = run_mwg(ds, spec, McmcConfig(iterations=3000, seed=2))
    reps = {r.statistic_name: r for r in standard_checks(draws, ds, spec, T=200, seed=2)}
    assert reps["Y2 regression: Y1"].ppp < 0.05


def test_three_wave_battery_rows():
    gen = three_wave_generator(seed=2, n_p=300, n_r1=100, n_r2=100)
    names = [s.name for s in statistic_battery(generate(gen))]
    assert names[:8] == [
        "Pr(Y2=0) in R1", "Pr(Y3=0) in R2", "Pr(Y2=0|W1=1)", "Pr(Y3=0|W1=1, W2=1)", "Pr(Y3=0|W1=0, W2=1)",
        "Pr(Y2=0, Y3=0|W1=1, W2=1)", "Pr(Y2=0, Y3=1|W1=1, W2=1)", "Pr(Y2=1, Y3=0|W1=1, W2=1)"]
    assert names[8:] == ["Y3 regression: INT", "Y3 regression: X", "Y3 regression: Y1", "Y3 regression: Y2",
                         "Y3 regression: Y1:Y2"]


def test_sensitivity_zero_equals_plain_fit():
    ds = generate(table1_generator(seed=4, n_p=500, n_r=250))
    spec = two_wave_an()
    cfg = McmcConfig(iterations=300, seed=5)
    rows = sensitivity_scan(ds, spec, "W1", "Y1:Y2", [0.0, 1.0], cfg)
    plain = run_mwg(ds, spec, cfg).summary()
    assert [r.fixed_value for r in rows] == [0.0, 1.0]
    for name in plain.index:
        assert rows[0].summary[name]["mean"] == plain.loc[name, "mean"]
    assert rows[1].spec["W1"].fixed[Term(("Y1", "Y2"))] == 1.0


def test_odds_ratio_gloss():
    spec = two_wave_an().with_fixed("W1", Term(("Y1", "Y2")), 1.0)
    text = odds_ratio_gloss(spec, "W1", Term(("Y1", "Y2")), 1.0, {"W1~Y2": 1.3})
    assert f"{math.exp(2.3):.2f}" in text and "Y1=1" in text


def test_convergence_constant_chains():
    d = PosteriorDraws(["a"], np.ones((2, 100, 1)), {})
    row = convergence_summary(d)[0]
    assert row.undefined and math.isnan(row.rhat)


def test_convergence_well_mixed():
    d = PosteriorDraws(["a", "b"], np.random.default_rng(0).normal(size=(4, 2000, 2)), {})
    rows = convergence_summary(d)
    assert all(r.rhat < 1.01 for r in rows)
    assert all(r.ess_bulk > 4000 for r in rows)


def test_convergence_disjoint_modes():
    rng = np.random.default_rng(1)
    chains = rng.normal(size=(2, 500, 1))
    chains[1] += 10
    assert convergence_summary(PosteriorDraws(["a"], chains, {}))[0].rhat > 1.2


def test_convergence_needs_chains_and_draws():
    with pytest.raises(TooFewDraws):
        convergence_summary(PosteriorDraws(["a"], np.zeros((1, 100, 1)), {}))
    with pytest.raises(TooFewDraws):
        convergence_summary(PosteriorDraws(["a"], np.zeros((2, 3, 1)), {}))


def test_ess_of_ar1_chain():
    rng = np.random.default_rng(3)
    n, phi = 20000, 0.8
    x = np.zeros((2, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + rng.normal(size=2)
    row = convergence_summary(PosteriorDraws(["a"], x[:, :, None], {}))[0]
    expected = 2 * n * (1 - phi) / (1 + phi)
    assert 0.7 * expected < row.ess_bulk < 1.3 * expected
