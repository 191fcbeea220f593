import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from attrlab.data import Cohort
from attrlab.errors import AutocorrelationTooHigh, InsufficientDraws, RankDeficient, Separation
from attrlab.mi import (ImputationMode, autocorrelation, emit_imputations, fit_logistic_ml, parse_mode,
                        rubin_combine, select_draws)
from attrlab.sampler import McmcConfig, PosteriorDraws, run_mwg
from attrlab.sim import generate, table1_generator, two_wave_an

from conftest import two_wave


def fake_draws(chains):
    chains = np.asarray(chains, float)
    names = [f"p{j}" for j in range(chains.shape[-1])]
    return PosteriorDraws(names, chains, {})


@pytest.fixture(scope="module")
def fitted():
    ds = generate(table1_generator(seed=5, n_p=800, n_r=400))
    spec = two_wave_an()
    return ds, spec, run_mwg(ds, spec, McmcConfig(iterations=3000, seed=1))


def test_rubin_constant_estimates():
    r = rubin_combine([1, 1, 1], [4, 4, 4])
    assert (r.q_bar, r.b_m, r.T_m) == (1.0, 0.0, 4.0)
    assert r.degenerate_between and math.isinf(r.nu_m) and math.isinf(r.nu_BR)
    assert r.ci95[1] - 1 == pytest.approx(stats.norm.ppf(0.975) * 2)


def test_rubin_two_values():
    r = rubin_combine([0, 2], [1, 1])
    assert r.q_bar == 1 and r.b_m == 2 and r.T_m == pytest.approx(4.0)
    assert r.nu_m == pytest.approx((4 / 3) ** 2)
    assert r.nu_m == pytest.approx(1.778, abs=1e-3)


def test_rubin_needs_two():
    with pytest.raises(ValueError):
        rubin_combine([1.0], [1.0])


vec = st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=30)


@settings(max_examples=200, deadline=None)
@given(vec, st.data())
def test_rubin_matches_hand_formulas(q, data):
    u = data.draw(st.lists(st.floats(1e-3, 10), min_size=len(q), max_size=len(q)))
    m = len(q)
    qb = sum(q) / m
    b = sum((v - qb) ** 2 for v in q) / (m - 1)
    ub = sum(u) / m
    T = (1 + 1 / m) * b + ub
    r = rubin_combine(q, u)
    assert r.q_bar == pytest.approx(qb, rel=1e-12, abs=1e-12)
    assert r.u_bar == pytest.approx(ub, rel=1e-12)
    if b > 1e-9:
        assert r.b_m == pytest.approx(b, rel=1e-12, abs=1e-300)
        assert r.T_m == pytest.approx(T, rel=1e-12)
        assert r.nu_m == pytest.approx((m - 1) * (1 + ub / ((1 + 1 / m) * b)) ** 2, rel=1e-12)
    assert r.T_m >= r.u_bar


@settings(max_examples=100, deadline=None)
@given(vec, st.randoms(), st.floats(5, 1e5))
def test_rubin_permutation_and_dof_bounds(q, rnd, nu_com):
    u = [1.0 + abs(v) / 10 for v in q]
    a = rubin_combine(q, u, nu_com)
    idx = list(range(len(q)))
    rnd.shuffle(idx)
    b = rubin_combine([q[i] for i in idx], [u[i] for i in idx], nu_com)
    assert a.q_bar == pytest.approx(b.q_bar, rel=1e-12, abs=1e-12)
    assert a.T_m == pytest.approx(b.T_m, rel=1e-12)
    if not a.degenerate_between:
        assert a.nu_BR <= a.nu_m * (1 + 1e-12)


def test_nu_m_increases_with_within_share():
    base = rubin_combine([0.0, 1.0, 2.0], [1.0] * 3).nu_m
    more = rubin_combine([0.0, 1.0, 2.0], [2.0] * 3).nu_m
    assert more > base


def test_barnard_rubin_value():
    r = rubin_combine([0.0, 2.0], [1.0, 1.0], nu_com=10)
    gamma = 1.5 * 2 / 4
    nu_obs = 11 / 13 * 10 * (1 - gamma)
    assert r.nu_BR == pytest.approx(1 / (1 / r.nu_m + 1 / nu_obs), rel=1e-12)


def test_mode_parsing():
    assert parse_mode("P-only") is ImputationMode.POnly
    assert parse_mode("P+R") is ImputationMode.PPlusR
    assert parse_mode(ImputationMode.PPlusR) is ImputationMode.PPlusR


def test_no_missing_cells_gives_identical_copies():
    ds = two_wave([("Panel", 1, 1, 1), ("Panel", 0, 0, 1), ("Panel", 1, 0, 1)])
    from attrlab.model import default_an_spec
    spec = default_an_spec(ds.design)
    draws = fake_draws(np.zeros((1, 10, len(spec.param_names()))))
    out = emit_imputations(draws, ds, spec, 2, "POnly", seed=1)
    assert len(out) == 2
    assert np.array_equal(out[0].data.values, ds.values) and np.array_equal(out[1].data.values, ds.values)


def test_modes_sizes_and_agreement(fitted):
    ds, spec, draws = fitted
    p_only = emit_imputations(draws, ds, spec, 5, ImputationMode.POnly, seed=9)
    p_r = emit_imputations(draws, ds, spec, 5, ImputationMode.PPlusR, seed=9)
    n_p = int(ds.cohort_mask(Cohort.Panel).sum())
    for a, b in zip(p_only, p_r):
        assert len(a) == n_p and len(b) == len(ds)
        assert (a.data.values != -1).all() and (b.data.values != -1).all()
        assert not a.data.cohort_mask(Cohort.R1).any()
        assert np.array_equal(a.data.values, b.data.values[b.data.cohort_mask(Cohort.Panel)])
        assert a.draw_index == b.draw_index
    # observed cells untouched
    obs = ds.values != -1
    assert np.array_equal(p_r[0].data.values[obs], ds.values[obs])


def test_completed_fit_near_truth(fitted):
    ds, spec, draws = fitted
    imps = emit_imputations(draws, ds, spec, 5, "POnly", seed=2)
    fit = fit_logistic_ml(imps[0], "Y2 ~ 1 + X + Y1")
    assert fit.names == ["Y2~1", "Y2~X", "Y2~Y1"]
    assert abs(fit.q[2] - 0.7) < 0.5
    assert np.all(fit.u > 0)


def test_fit_intercept_only_balanced():
    ds = two_wave([("Panel", 1, 1, 1), ("Panel", 0, 0, 1)] * 50)
    fit = fit_logistic_ml(ds, "Y1 ~ 1")
    assert fit.q[0] == pytest.approx(0.0, abs=1e-10)
    assert fit.u[0] == pytest.approx(4 / 100)


def test_fit_separation():
    ds = two_wave([("Panel", 1, 1, 1), ("Panel", 0, 0, 1)] * 10)
    with pytest.raises(Separation):
        fit_logistic_ml(ds, "Y2 ~ 1 + Y1")


def test_fit_rank_deficient():
    ds = two_wave([("Panel", 1, 1, 1), ("Panel", 1, 0, 1)] * 10)
    with pytest.raises(RankDeficient):
        fit_logistic_ml(ds, "Y2 ~ 1 + Y1")


def test_insufficient_draws():
    with pytest.raises(InsufficientDraws):
        select_draws(fake_draws(np.zeros((1, 5, 2))), 10)


def test_autocorrelation_too_high():
    walk = np.cumsum(np.random.default_rng(0).normal(size=(1, 1000, 1)), axis=1)
    with pytest.raises(AutocorrelationTooHigh):
        select_draws(fake_draws(walk), 100)


def test_select_draws_spacing():
    iid = np.random.default_rng(1).normal(size=(2, 1000, 3))
    idx, stride = select_draws(fake_draws(iid), 100)
    assert len(idx) == 100 and len(set(idx)) == 100 and stride == 20


def test_autocorrelation_ar1():
    rng = np.random.default_rng(2)
    x = np.zeros(50000)
    for t in range(1, len(x)):
        x[t] = 0.6 * x[t - 1] + rng.normal()
    acf = autocorrelation(x, 3)
    assert np.allclose(acf, [1, 0.6, 0.36, 0.216], atol=0.02)
