import dataclasses
import itertools
import math

import numpy as np
import pytest

from attrlab.data import MISSING, Cohort, Variant, counts
from attrlab.mi import fit_logistic_ml
from attrlab.sampler import McmcConfig
from attrlab.sim import (TABLE1_TRUTH, ExperimentConfig, MiAudit, apyn_like_generator,
                         derived_seed, generate, preset_experiment, run_experiment, table1_generator,
                         table2_generator, three_wave_generator, two_wave_an)


def expit(v):
    return 1 / (1 + math.exp(-v))


@pytest.fixture(scope="module")
def table1_data():
    return generate(table1_generator(seed=0))


def test_sizes(table1_data):
    c = counts(table1_data)
    assert c["N_P"] == 10000 and c["N_R1"] == 5000


def test_y1_marginal(table1_data):
    truth = table1_data.truth[:, 0]
    expected = 0.5 * expit(0.3) + 0.5 * expit(-0.1)
    assert expected == pytest.approx(0.5247, abs=1e-4)
    se = math.sqrt(expected * (1 - expected) / len(truth))
    assert abs(truth.mean() - expected) < 4 * se


def test_cell_frequencies_match_analytic_joint(table1_data):
    t = TABLE1_TRUTH
    joint = {}
    for x, y1, y2, w1 in itertools.product([0, 1], repeat=4):
        p1 = expit(t["Y1~1"] + t["Y1~X"] * x)
        p2 = expit(t["Y2~1"] + t["Y2~X"] * x + t["Y2~Y1"] * y1)
        pw = expit(t["W1~1"] + t["W1~X"] * x + t["W1~Y1"] * y1 + t["W1~Y2"] * y2)
        joint[x, y1, y2, w1] = 0.5 * (p1 if y1 else 1 - p1) * (p2 if y2 else 1 - p2) * (pw if w1 else 1 - pw)
    panel = table1_data.cohort_mask(Cohort.Panel)
    full = np.column_stack([table1_data.x[panel, 0], table1_data.truth[panel]])
    n = len(full)
    for cell, p in joint.items():
        freq = np.all(full == np.array(cell), axis=1).mean()
        assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_masking_is_lossless(table1_data):
    obs = table1_data.values != MISSING
    assert np.array_equal(table1_data.values[obs], table1_data.truth[obs])
    assert np.all(np.isin(table1_data.truth, (0, 1)))
    r1 = table1_data.cohort_mask(Cohort.R1)
    assert np.all(table1_data.values[r1][:, [0, 2]] == MISSING)


def test_zero_coefficients():
    gen = table1_generator(seed=3)
    gen = dataclasses.replace(gen, params=dict.fromkeys(gen.params, 0.0))
    ds = generate(gen)
    assert np.allclose(ds.truth.mean(axis=0), 0.5, atol=0.02)
    panel = ds.cohort_mask(Cohort.Panel)
    assert abs((ds.column("W1")[panel] == 0).mean() - 0.5) < 0.02


@pytest.mark.parametrize("alpha", [-3.0, 3.0])
def test_selection_direction(alpha):
    gen = table1_generator(seed=4)
    gen = dataclasses.replace(gen, params={**gen.params, "W1~Y2": alpha})
    ds = generate(gen)
    panel = ds.cohort_mask(Cohort.Panel)
    completers = panel & (ds.column("W1") == 1)
    full_mean = ds.truth[panel, 1].mean()
    cc_mean = ds.column("Y2")[completers].mean()
    # responders over-represent Y2=1 exactly when selection loads positively on Y2
    assert (cc_mean > full_mean) == (alpha > 0)


def test_generate_deterministic():
    a = generate(table1_generator(seed=9, n_p=500, n_r=200))
    b = generate(table1_generator(seed=9, n_p=500, n_r=200))
    assert a.values.tobytes() == b.values.tobytes() and a.x.tobytes() == b.x.tobytes()
    c = generate(table1_generator(seed=10, n_p=500, n_r=200))
    assert a.values.tobytes() != c.values.tobytes()


def test_table2_generator_has_interaction():
    gen = table2_generator()
    assert gen.params["W1~Y1:Y2"] == 1.0
    ds = generate(dataclasses.replace(gen, sizes={"N_P": 300, "N_R1": 100}))
    assert len(ds) == 400


@pytest.mark.parametrize("variant", list(Variant)[1:])
def test_three_wave_masks(variant):
    ds = generate(three_wave_generator(seed=1, variant=variant, n_p=800, n_r1=300, n_r2=300))
    panel = ds.cohort_mask(Cohort.Panel)
    drop = panel & (ds.column("W1") == 0)
    if variant.returners:
        assert np.all(ds.column("W2")[panel] != MISSING)
    else:
        assert np.all(ds.column("W2")[drop] == MISSING) and np.all(ds.column("Y3")[drop] == MISSING)
    r1 = ds.cohort_mask(Cohort.R1)
    assert np.all((ds.column("W2")[r1] != MISSING) == variant.follow_up)
    c = counts(ds)
    assert c["N_CP2"] <= c["N_CP"] or variant.returners


def test_apyn_like_shape():
    gen = apyn_like_generator(seed=1)
    ds = generate(gen)
    c = counts(ds)
    assert (c["N_P"], c["N_R1"], c["N_R2"]) == (2730, 691, 461)
    assert ds.covariate_names == ("AGE1", "AGE2", "AGE3", "MALE", "COLLEGE", "BLACK")


def test_derived_seeds_distinct():
    seeds = {derived_seed(0, r, k) for r in range(50) for k in range(3)}
    assert len(seeds) == 150


def test_single_replication_degenerate_coverage():
    gen = table1_generator(n_p=60, n_r=30)
    cfg = ExperimentConfig(gen, [("AN", two_wave_an())], 1, McmcConfig(iterations=200), seed=1)
    res = run_experiment(cfg)
    assert set(res.summary()["coverage"]) <= {0.0, 100.0}
    assert list(res.table().columns) == ["parameter", "truth", "AN mean", "AN cov"]


def test_mi_audit_without_missing_cells_uses_within_variance():
    gen = table1_generator(n_p=400, n_r=200)
    cfg = ExperimentConfig(gen, [("AN", two_wave_an())], 2, McmcConfig(iterations=600), seed=2,
                           mi_audit=MiAudit(m=5, formulas=("Y1 ~ 1 + X",), max_autocorr=1.0))
    res = run_experiment(cfg)
    assert np.allclose(res.mi["T_m"], res.mi["u_bar"], rtol=0, atol=0)
    assert list(res.mi_audit().columns) == ["parameter", "Q", "avg_q_bar", "var_q_bar", "avg_T", "coverage",
                                            "ratio"]


def test_experiment_reproducible():
    gen = table1_generator(n_p=80, n_r=40)
    cfg = ExperimentConfig(gen, [("AN", two_wave_an())], 2, McmcConfig(iterations=100), seed=3)
    assert run_experiment(cfg).fits.equals(run_experiment(cfg).fits)


def test_presets():
    assert [l for l, _ in preset_experiment("table1").fitted_specs] == ["AN", "MAR", "HW"]
    t2 = preset_experiment("table2", scale="full")
    assert t2.replications == 500 and "W1~Y1:Y2" not in t2.fitted_specs[1][1].param_names()
    assert preset_experiment("table3").mi_audit.m == 100
    with pytest.raises(ValueError):
        preset_experiment("table9")


@pytest.mark.slow
def test_complete_data_ml_variance_calibrated_over_many_datasets():
    # Fisher variance of the Y1 regression should match the spread of the ML estimate across datasets
    gen = table1_generator()
    q, u = [], []
    for rep in range(1000):
        ds = generate(gen.with_seed(derived_seed(0, rep, 0)))
        fit = fit_logistic_ml(ds.subset(ds.cohort_mask(Cohort.Panel)), "Y1 ~ 1 + X")
        q.append(fit.q)
        u.append(fit.u)
    ratio = np.mean(u, axis=0) / np.var(q, axis=0, ddof=1)
    assert np.all(np.abs(ratio - 1) < 0.1)
