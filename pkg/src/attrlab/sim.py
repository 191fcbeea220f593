"""Synthetic panels with refreshment samples and Monte Carlo experiment runners."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit

from .data import MISSING, COHORT_CODES, Cohort, PanelDataset, StudyDesign, Variant, make_dataset
from .likelihood import ParameterVector, compile_spec
from .mi import ImputationMode, combine_fits, emit_imputations, fit_logistic_ml, parse_mode, select_draws
from .model import ConditionalModel, ModelSpec, Term, default_an_spec, restrict
from .sampler import McmcConfig, run_mwg


@dataclass
class GeneratorConfig:
    """Generating chain and its true coefficients.

    ``spec`` is not checked for identification: it may contain terms no
    fittable model can estimate (e.g. a Y1*Y2 effect on W1).
    """

    design: StudyDesign
    spec: ModelSpec
    params: Mapping[str, float]
    covariate_law: Mapping[str, tuple[str, float]]
    sizes: Mapping[str, int]
    seed: int = 0

    def truth(self) -> ParameterVector:
        return ParameterVector.from_dict(self.spec, self.params)

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return dataclasses.replace(self, seed=seed)


def _draw_covariates(rng, law, n):
    cols = []
    for name, (kind, value) in law.items():
        if kind == "bernoulli":
            cols.append((rng.random(n) < value).astype(float))
        elif kind == "fixed":
            cols.append(np.full(n, float(value)))
        else:
            raise ValueError(f"covariate law {kind!r} not supported")
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def generate(cfg: GeneratorConfig) -> PanelDataset:
    """Draw a complete panel from the chain, then apply the design's mask.

    The unmasked values are kept in ``PanelDataset.truth``.
    """
    design = cfg.design
    rng = np.random.default_rng(cfg.seed)
    n_p = int(cfg.sizes.get("N_P", 0))
    n_r1 = int(cfg.sizes.get("N_R1", 0))
    n_r2 = int(cfg.sizes.get("N_R2", 0)) if design.n_waves == 3 else 0
    n = n_p + n_r1 + n_r2
    cov_names = tuple(cfg.covariate_law)
    x = _draw_covariates(rng, cfg.covariate_law, n)
    cohort = np.repeat(np.array([COHORT_CODES[Cohort.Panel], COHORT_CODES[Cohort.R1], COHORT_CODES[Cohort.R2]],
                                dtype=np.int8), [n_p, n_r1, n_r2])

    theta = cfg.truth()
    blocks = compile_spec(cfg.spec, cov_names)
    full = np.full((n, len(design.chain)), MISSING, dtype=np.int8)
    for b in blocks:
        z = np.hstack([x, full.astype(float)])
        d, off = b.design(z)
        p = expit(d @ theta.blocks[b.response] + off)
        full[:, b.response_col] = (rng.random(n) < p).astype(np.int8)

    vals = full.copy()
    col = {v: i for i, v in enumerate(design.chain)}
    panel = cohort == COHORT_CODES[Cohort.Panel]
    r1 = cohort == COHORT_CODES[Cohort.R1]
    r2 = cohort == COHORT_CODES[Cohort.R2]
    vals[panel & (full[:, col["W1"]] == 0), col["Y2"]] = MISSING
    vals[r1, col["Y1"]] = MISSING
    vals[r1, col["W1"]] = MISSING
    if design.n_waves == 3:
        y3, w2 = col["Y3"], col["W2"]
        if not design.variant.returners:
            gone = panel & (full[:, col["W1"]] == 0)
            vals[gone, y3] = MISSING
            vals[gone, w2] = MISSING
        if not design.variant.follow_up:
            vals[r1, y3] = MISSING
            vals[r1, w2] = MISSING
        vals[(panel | r1) & (vals[:, w2] == 0), y3] = MISSING
        for v in ("Y1", "Y2", "W1", "W2"):
            vals[r2, col[v]] = MISSING
    ids = tuple([f"p{i}" for i in range(n_p)] + [f"r{i}" for i in range(n_r1)] + [f"s{i}" for i in range(n_r2)])
    return make_dataset(design, cohort, x, vals, ids, cov_names, truth=full)


# ---------------------------------------------------------------- presets

TWO_WAVE = StudyDesign.from_variant(Variant.TwoWave)

TABLE1_TRUTH = {
    "Y1~1": 0.3, "Y1~X": -0.4,
    "Y2~1": 0.3, "Y2~X": -0.3, "Y2~Y1": 0.7,
    "W1~1": -0.4, "W1~X": 1.0, "W1~Y1": -0.7, "W1~Y2": 1.3,
}


def two_wave_an(covariates=("X",)) -> ModelSpec:
    return default_an_spec(TWO_WAVE, covariates)


def two_wave_mar(covariates=("X",)) -> ModelSpec:
    """Selection on the wave-1 outcome only."""
    return restrict(two_wave_an(covariates), "W1", ["Y2"])


def two_wave_hw(covariates=("X",)) -> ModelSpec:
    """Selection on the wave-2 outcome only (Hausman-Wise)."""
    return restrict(two_wave_an(covariates), "W1", ["Y1"])


def _gen_spec_with_interaction() -> ModelSpec:
    an = two_wave_an()
    w1 = an["W1"]
    return an.replace(ConditionalModel("W1", (*w1.terms, Term(("Y1", "Y2")))))


def table1_generator(seed: int = 0, n_p: int = 10_000, n_r: int = 5_000) -> GeneratorConfig:
    # binary covariate X ~ Bernoulli(0.5)
    return GeneratorConfig(TWO_WAVE, two_wave_an(), dict(TABLE1_TRUTH), {"X": ("bernoulli", 0.5)},
                           {"N_P": n_p, "N_R1": n_r}, seed)


def table2_generator(seed: int = 0, n_p: int = 10_000, n_r: int = 5_000, interaction: float = 1.0) -> GeneratorConfig:
    params = dict(TABLE1_TRUTH)
    params["W1~Y1:Y2"] = interaction
    return GeneratorConfig(TWO_WAVE, _gen_spec_with_interaction(), params, {"X": ("bernoulli", 0.5)},
                           {"N_P": n_p, "N_R1": n_r}, seed)


THREE_WAVE_TRUTH = {
    # waves 1-2 reuse the two-wave truths; wave-3 values are artifact choices
    **TABLE1_TRUTH,
    "Y3~1": -0.2, "Y3~X": 0.3, "Y3~Y1": 0.8, "Y3~Y2": 1.2, "Y3~W1": -0.3, "Y3~Y1:Y2": -0.4, "Y3~Y1:W1": 0.3,
    "W2~1": 0.2, "W2~X": 0.4, "W2~Y1": 0.3, "W2~Y2": -0.3, "W2~Y3": -0.8, "W2~W1": 1.5,
    "W2~Y1:Y2": 0.2, "W2~Y1:W1": -0.4,
}


def three_wave_generator(seed: int = 0, variant: Variant = Variant.ThreeReturnersNoFollow,
                         n_p: int = 4000, n_r1: int = 1500, n_r2: int = 1500) -> GeneratorConfig:
    design = StudyDesign.from_variant(variant)
    spec = default_an_spec(design, ("X",))
    params = {k: v for k, v in THREE_WAVE_TRUTH.items() if k in spec.param_names()}
    return GeneratorConfig(design, spec, params, {"X": ("bernoulli", 0.5)},
                           {"N_P": n_p, "N_R1": n_r1, "N_R2": n_r2}, seed)


APYN_COVARIATES = ("AGE1", "AGE2", "AGE3", "MALE", "COLLEGE", "BLACK")
# baseline-panel proportions of the demographic indicators; drawn independently
APYN_COVARIATE_LAW = {"AGE1": ("bernoulli", 0.28), "AGE2": ("bernoulli", 0.32), "AGE3": ("bernoulli", 0.25),
                      "MALE": ("bernoulli", 0.45), "COLLEGE": ("bernoulli", 0.30), "BLACK": ("bernoulli", 0.08)}
APYN_LIKE_TRUTH = {
    "Y1~1": -1.60, "Y1~AGE1": 0.25, "Y1~AGE2": 0.75, "Y1~AGE3": 1.26, "Y1~COLLEGE": 0.11, "Y1~MALE": -0.05,
    "Y1~BLACK": 0.75,
    "Y2~1": -1.77, "Y2~AGE1": 0.27, "Y2~AGE2": 0.62, "Y2~AGE3": 0.96, "Y2~COLLEGE": 0.53, "Y2~MALE": -0.02,
    "Y2~BLACK": -0.02, "Y2~Y1": 2.49,
    "W1~1": 1.64, "W1~AGE1": -0.08, "W1~AGE2": 0.24, "W1~AGE3": 0.37, "W1~COLLEGE": 0.35, "W1~MALE": 0.13,
    "W1~BLACK": -0.54, "W1~Y1": 0.50, "W1~Y2": -0.58,
    "Y3~1": 0.04, "Y3~AGE1": 0.03, "Y3~AGE2": 0.15, "Y3~AGE3": 0.88, "Y3~COLLEGE": 0.57, "Y3~MALE": -0.02,
    "Y3~BLACK": 0.11, "Y3~Y1": 1.94, "Y3~Y2": 2.03, "Y3~W1": -0.42, "Y3~Y1:Y2": -0.37, "Y3~Y1:W1": -0.52,
    "W2~1": -1.40, "W2~AGE1": 0.28, "W2~AGE2": 0.27, "W2~AGE3": 0.41, "W2~COLLEGE": 0.58, "W2~MALE": 0.08,
    "W2~BLACK": -0.12, "W2~Y1": 0.88, "W2~Y2": 0.27, "W2~Y3": -1.10, "W2~W1": 2.47, "W2~Y1:Y2": -0.07,
    "W2~Y1:W1": -0.62,
}


def apyn_like_generator(seed: int = 0, n_p: int = 2730, n_r1: int = 691, n_r2: int = 461) -> GeneratorConfig:
    """Returners design shaped like the election-poll analysis (synthetic values)."""
    design = StudyDesign.from_variant(Variant.ThreeReturnersNoFollow)
    spec = default_an_spec(design, APYN_COVARIATES)
    return GeneratorConfig(design, spec, dict(APYN_LIKE_TRUTH), dict(APYN_COVARIATE_LAW),
                           {"N_P": n_p, "N_R1": n_r1, "N_R2": n_r2}, seed)


# ---------------------------------------------------------------- experiments

@dataclass
class MiAudit:
    """Multiple-imputation variance audit run on one fitted spec's draws."""

    m: int = 100
    mode: ImputationMode = ImputationMode.POnly
    formulas: tuple[str, ...] = ("Y1 ~ 1 + X", "Y2 ~ 1 + X + Y1")
    spec_label: str = "AN"
    max_autocorr: float = 0.1


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig
    fitted_specs: list[tuple[str, ModelSpec]]
    replications: int = 100
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    mi_audit: MiAudit | None = None
    seed: int = 0
    name: str = "experiment"

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    def describe(self) -> dict:
        return {
            "name": self.name,
            "replications": self.replications,
            "seed": self.seed,
            "sizes": dict(self.generator.sizes),
            "truth": dict(self.generator.params),
            "fitted_specs": {label: spec.to_text() for label, spec in self.fitted_specs},
            "mcmc": self.mcmc.to_dict(),
            "mi_audit": None if self.mi_audit is None else
            {**dataclasses.asdict(self.mi_audit), "mode": self.mi_audit.mode.value},
        }


def derived_seed(base: int, *keys: int) -> int:
    """Independent 32-bit seed for a (replication, fit, ...) coordinate."""
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def _true_value(cfg: ExperimentConfig, name: str) -> float:
    return float(cfg.generator.params.get(name, 0.0))


def run_replication(cfg: ExperimentConfig, rep: int) -> tuple[list[dict], list[dict]]:
    """Generate one dataset, fit every spec, optionally audit MI. Returns (fit rows, MI rows)."""
    ds = generate(cfg.generator.with_seed(derived_seed(cfg.seed, rep, 0)))
    rows, mi_rows = [], []
    for k, (label, spec) in enumerate(cfg.fitted_specs):
        mc = dataclasses.replace(cfg.mcmc, seed=derived_seed(cfg.seed, rep, 1, k))
        draws = run_mwg(ds, spec, mc)
        summ = draws.summary()
        for name in summ.index:
            truth = _true_value(cfg, name)
            r = summ.loc[name]
            rows.append({"rep": rep, "spec": label, "parameter": name, "truth": truth, "mean": r["mean"],
                         "sd": r["sd"], "lower": r["lower"], "upper": r["upper"],
                         "covered": bool(r["lower"] <= truth <= r["upper"])})
        audit = cfg.mi_audit
        if audit is not None and label == audit.spec_label:
            idx, _ = select_draws(draws, audit.m, audit.max_autocorr)
            imps = emit_imputations(draws, ds, spec, audit.m, audit.mode,
                                    seed=derived_seed(cfg.seed, rep, 2), indices=idx)
            for formula in audit.formulas:
                results = combine_fits([fit_logistic_ml(c, formula) for c in imps])
                for name, res in results.items():
                    truth = _true_value(cfg, name)
                    mi_rows.append({"rep": rep, "parameter": name, "truth": truth, "q_bar": res.q_bar,
                                    "T_m": res.T_m, "b_m": res.b_m, "u_bar": res.u_bar,
                                    "covered": bool(res.ci95[0] <= truth <= res.ci95[1])})
    return rows, mi_rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    fits: pd.DataFrame
    mi: pd.DataFrame
    seconds: float = 0.0

    def summary(self) -> pd.DataFrame:
        """Mean of posterior means, 95% coverage (percent) and its Monte Carlo s.e. per (spec, parameter)."""
        return summarize_fits(self.fits)

    def mi_audit(self) -> pd.DataFrame:
        return summarize_mi(self.mi)

    def table(self) -> pd.DataFrame:
        return wide_table(self.summary(), [label for label, _ in self.config.fitted_specs])


def summarize_fits(fits: pd.DataFrame) -> pd.DataFrame:
    order = list(dict.fromkeys(fits["parameter"]))
    g = fits.groupby(["spec", "parameter"], sort=False)
    out = g.agg(truth=("truth", "first"), mean=("mean", "mean"), coverage=("covered", "mean"),
                reps=("rep", "nunique")).reset_index()
    out["coverage"] *= 100
    c = out["coverage"] / 100
    out["mc_se"] = 100 * np.sqrt(c * (1 - c) / out["reps"])
    out["parameter"] = pd.Categorical(out["parameter"], order, ordered=True)
    return out.sort_values(["spec", "parameter"], kind="stable").reset_index(drop=True)


def wide_table(summary: pd.DataFrame, labels: Sequence[str]) -> pd.DataFrame:
    """One row per parameter; a mean and coverage column per fitted spec."""
    order = list(dict.fromkeys(summary["parameter"].astype(str)))
    wide = pd.DataFrame({"parameter": order})
    truth = summary.drop_duplicates("parameter").set_index(summary.drop_duplicates("parameter")["parameter"].astype(str))
    wide["truth"] = wide["parameter"].map(truth["truth"])
    for label in labels:
        sub = summary[summary["spec"] == label].copy()
        sub.index = sub["parameter"].astype(str)
        wide[f"{label} mean"] = wide["parameter"].map(sub["mean"])
        wide[f"{label} cov"] = wide["parameter"].map(sub["coverage"])
    return wide


def summarize_mi(mi: pd.DataFrame) -> pd.DataFrame:
    """Per parameter: Q, average and variance of q_bar, average T_m, 95% coverage (percent)."""
    if mi.empty:
        return pd.DataFrame(columns=["parameter", "Q", "avg_q_bar", "var_q_bar", "avg_T", "coverage", "ratio"])
    g = mi.groupby("parameter", sort=False)
    out = g.agg(Q=("truth", "first"), avg_q_bar=("q_bar", "mean"), var_q_bar=("q_bar", lambda v: v.var(ddof=1)),
                avg_T=("T_m", "mean"), coverage=("covered", "mean")).reset_index()
    out["coverage"] *= 100
    out["ratio"] = out["avg_T"] / out["var_q_bar"]
    return out


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, progress=None) -> ExperimentResult:
    t0 = time.time()
    reps = range(cfg.replications)
    if jobs > 1:
        parts = Parallel(n_jobs=jobs)(delayed(run_replication)(cfg, r) for r in reps)
    else:
        parts = []
        for r in reps:
            parts.append(run_replication(cfg, r))
            if progress:
                progress(r + 1, cfg.replications)
    fits = pd.DataFrame([row for p in parts for row in p[0]])
    mi = pd.DataFrame([row for p in parts for row in p[1]])
    return ExperimentResult(cfg, fits, mi, time.time() - t0)


def mi_variance_audit(cfg: ExperimentConfig, m: int = 100, mode=ImputationMode.POnly,
                      jobs: int = 1) -> pd.DataFrame:
    """Bias of Rubin's variance estimator over replications (first fitted spec imputes)."""
    if cfg.generator.design.n_waves != 2:
        raise ValueError("the MI variance audit is defined for two-wave designs")
    label = cfg.fitted_specs[0][0]
    audit = MiAudit(m=m, mode=parse_mode(mode), spec_label=label)
    run = dataclasses.replace(cfg, fitted_specs=cfg.fitted_specs[:1], mi_audit=audit)
    return run_experiment(run, jobs).mi_audit()


# ---------------------------------------------------------------- experiment presets

DESK_REPS = 100
FULL_REPS = 500


def preset_experiment(name: str, scale: str = "desk", replications: int | None = None, seed: int = 0,
                      mcmc: McmcConfig | None = None) -> ExperimentConfig:
    """Ready-made experiments: table1, table2, table3, apyn-like."""
    reps = replications or (FULL_REPS if scale == "full" else DESK_REPS)
    mcmc = mcmc or McmcConfig()
    key = name.lower().replace("_", "-")
    if key == "table1":
        return ExperimentConfig(table1_generator(), [("AN", two_wave_an()), ("MAR", two_wave_mar()),
                                                     ("HW", two_wave_hw())], reps, mcmc, None, seed, key)
    if key == "table2":
        an = two_wave_an()
        fixed = an.with_fixed("W1", Term(("Y1", "Y2")), 1.0)
        return ExperimentConfig(table2_generator(), [("AN", an), ("AN+aY1Y2", fixed)], reps, mcmc, None, seed, key)
    if key == "table3":
        return ExperimentConfig(table1_generator(), [("AN", two_wave_an())], reps, mcmc, MiAudit(m=100), seed, key)
    if key == "apyn-like":
        gen = apyn_like_generator()
        return ExperimentConfig(gen, [("AN", gen.spec)], reps, mcmc, None, seed, key)
    raise ValueError(f"unknown preset {name!r} (table1, table2, table3, apyn-like)")
