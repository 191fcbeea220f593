"""Posterior predictive checks, convergence summaries and separability scans."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import MISSING, Cohort, PanelDataset
from .errors import InsufficientDraws, Separation, TooFewDraws
from .glm import compress_rows, newton_logistic
from .likelihood import CompletionTable
from .mi import select_draws
from .model import INTERCEPT, ConditionalModel, ModelSpec, Term
from .sampler import McmcConfig, PosteriorDraws, run_mwg

FLAG_LEVEL = 0.05


# ------------------------------------------------------------ ppp

def ppp(s_d: float, s_r: Sequence[float]) -> float:
    """Two-sided posterior predictive probability; ties count on neither side."""
    s_r = np.asarray(s_r, float)
    if len(s_r) == 0:
        raise ValueError("need at least one replicated statistic")
    below = int(np.sum(s_d > s_r))
    above = int(np.sum(s_r > s_d))
    return (2.0 / len(s_r)) * min(below, above)


@dataclass
class PppReport:
    statistic_name: str
    s_d: float
    s_r: list[float]
    ppp: float

    @property
    def flagged(self) -> bool:
        return self.ppp < FLAG_LEVEL

    def to_dict(self) -> dict:
        return {"statistic": self.statistic_name, "s_d": self.s_d, "ppp": self.ppp,
                "flagged": self.flagged, "s_r": self.s_r}


# ------------------------------------------------------------ replication

def replicated_cells(ds: PanelDataset) -> np.ndarray:
    """Observed outcome cells that predictive replication regenerates (Y2 and Y3)."""
    mask = np.zeros(ds.values.shape, bool)
    for var in ("Y2", "Y3"):
        if var in ds.design.chain:
            j = ds.design.index(var)
            mask[:, j] = ds.values[:, j] != MISSING
    return mask


def _replication_table(ds: PanelDataset, spec: ModelSpec, rep: np.ndarray) -> CompletionTable:
    blank = np.where(rep, MISSING, ds.values)
    anchor = (ds.values != MISSING)
    idx = np.arange(ds.values.shape[1])
    last = np.where(anchor.any(axis=1), np.max(np.where(anchor, idx, -1), axis=1), -1)
    mask = (blank == MISSING) & (idx[None, :] <= last[:, None])
    return CompletionTable(spec, ds.covariate_names, ds.x, blank, mask)


def replicate_data(draws: PosteriorDraws, ds: PanelDataset, spec: ModelSpec, T: int = 500,
                   seed: int = 0) -> list[PanelDataset]:
    """Regenerate every observed Y2/Y3 cell given each case's other observed cells.

    Uses ``T`` evenly spaced draws. Cells that are not replicated are copied
    unchanged; latent cells stay missing.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if draws.matrix.shape[0] < T:
        raise InsufficientDraws(f"{draws.matrix.shape[0]} retained draws cannot supply T={T} replicates")
    idx = _spaced(draws, T)
    rep = replicated_cells(ds)
    table = _replication_table(ds, spec, rep)
    rng = np.random.default_rng(seed)
    out = []
    for i in idx:
        theta = draws.theta(spec, int(i))
        logp, _ = table.group_logprob(table.row_loglik(theta))
        new = table.sample_cases(rng, logp)
        vals = np.where(rep, new, ds.values).astype(np.int8)
        out.append(ds.with_values(vals))
    return out


def _spaced(draws: PosteriorDraws, n: int) -> np.ndarray:
    if n == 1:
        return np.array([draws.matrix.shape[0] - 1])
    return select_draws(draws, n, max_autocorr=np.inf)[0]


# ------------------------------------------------------------ statistic battery

@dataclass
class Statistic:
    name: str
    fn: Callable[[PanelDataset], float]


def _prob(ds, cohort, where: dict, target: dict) -> float:
    sel = ds.cohort_mask(cohort)
    for v, val in where.items():
        sel &= ds.column(v) == val
    for v in target:
        sel &= ds.column(v) != MISSING
    if not sel.any():
        return math.nan
    hit = np.ones(int(sel.sum()), bool)
    for v, val in target.items():
        hit &= ds.column(v)[sel] == val
    return float(hit.mean())


def _label(target, where, cohort=None):
    t = ", ".join(f"{k}={v}" for k, v in target.items())
    if cohort is not None:
        return f"Pr({t}) in {cohort.value}"
    return f"Pr({t}|{', '.join(f'{k}={v}' for k, v in where.items())})"


def complete_case_model(ds: PanelDataset) -> ConditionalModel:
    """Regression of the final outcome on covariates and earlier outcomes."""
    cov = [Term((c,)) for c in ds.covariate_names]
    if ds.design.n_waves == 2:
        return ConditionalModel("Y2", (INTERCEPT, *cov, Term(("Y1",))))
    return ConditionalModel("Y3", (INTERCEPT, *cov, Term(("Y1",)), Term(("Y2",)), Term(("Y1", "Y2"))))


def _complete_case_coefs(ds: PanelDataset, model: ConditionalModel) -> np.ndarray:
    sel = ds.cohort_mask(Cohort.Panel)
    for w in ("W1", "W2"):
        if w in ds.design.chain:
            sel &= ds.column(w) == 1
    cols = {c: ds.x[sel, i] for i, c in enumerate(ds.covariate_names)}
    cols.update({v: ds.values[sel, i].astype(float) for i, v in enumerate(ds.design.chain)})
    d = np.ones((int(sel.sum()), len(model.terms)))
    for j, t in enumerate(model.terms):
        for f in t.factors:
            d[:, j] *= cols[f]
    y = cols[model.response]
    try:
        return newton_logistic(*compress_rows(d, y)).coef
    except Separation:
        return np.full(len(model.terms), np.nan)


def statistic_battery(ds: PanelDataset) -> list[Statistic]:
    """Observable-cell probabilities plus complete-case regression coefficients."""
    P, R1, R2 = Cohort.Panel, Cohort.R1, Cohort.R2
    stats_ = [Statistic(_label({"Y2": 0}, {}, R1), lambda d: _prob(d, R1, {}, {"Y2": 0}))]
    three = ds.design.n_waves == 3
    if three:
        stats_.append(Statistic(_label({"Y3": 0}, {}, R2), lambda d: _prob(d, R2, {}, {"Y3": 0})))
    stats_.append(Statistic(_label({"Y2": 0}, {"W1": 1}), lambda d: _prob(d, P, {"W1": 1}, {"Y2": 0})))
    if three:
        w11 = {"W1": 1, "W2": 1}
        stats_.append(Statistic(_label({"Y3": 0}, w11), lambda d: _prob(d, P, w11, {"Y3": 0})))
        if ds.design.variant.returners:
            w01 = {"W1": 0, "W2": 1}
            stats_.append(Statistic(_label({"Y3": 0}, w01), lambda d: _prob(d, P, w01, {"Y3": 0})))
        for a, b in ((0, 0), (0, 1), (1, 0)):
            tgt = {"Y2": a, "Y3": b}
            stats_.append(Statistic(_label(tgt, w11), lambda d, tgt=tgt: _prob(d, P, w11, tgt)))
        if ds.design.variant.follow_up:
            stats_.append(Statistic("Pr(Y3=0|W2=1) in R1", lambda d: _prob(d, R1, {"W2": 1}, {"Y3": 0})))
    model = complete_case_model(ds)
    cache = {}

    def coef(d, j):
        key = id(d)
        if key not in cache:
            cache.clear()
            cache[key] = _complete_case_coefs(d, model)
        return float(cache[key][j])

    for j, t in enumerate(model.terms):
        name = "INT" if t == INTERCEPT else t.label
        stats_.append(Statistic(f"{model.response} regression: {name}", lambda d, j=j: coef(d, j)))
    return stats_


def standard_checks(draws: PosteriorDraws, ds: PanelDataset, spec: ModelSpec, T: int = 500,
                    seed: int = 0, replicates: list[PanelDataset] | None = None) -> list[PppReport]:
    reps = replicates if replicates is not None else replicate_data(draws, ds, spec, T, seed)
    battery = statistic_battery(ds)
    s_ds = [st.fn(ds) for st in battery]
    table = np.array([[st.fn(r) for st in battery] for r in reps]).reshape(len(reps), len(battery))
    out = []
    for k, st in enumerate(battery):
        s_d, s_r = s_ds[k], table[:, k].tolist()
        finite = [v for v in s_r if math.isfinite(v)]
        value = ppp(s_d, finite) if finite and math.isfinite(s_d) else math.nan
        out.append(PppReport(st.name, s_d, s_r, value))
    return out


def format_ppp_table(reports: Sequence[PppReport]) -> str:
    width = max(len(r.statistic_name) for r in reports) + 2
    lines = [f"{'Quantity':<{width}}{'observed':>10}{'ppp':>8}"]
    for r in reports:
        flag = "  *" if r.flagged else ""
        lines.append(f"{r.statistic_name:<{width}}{r.s_d:>10.4f}{r.ppp:>8.2f}{flag}")
    return "\n".join(lines) + "\n"


def ppp_json(reports: Sequence[PppReport], include_replicates: bool = False) -> str:
    rows = []
    for r in reports:
        d = r.to_dict()
        if not include_replicates:
            d.pop("s_r")
        rows.append({k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()})
    return json.dumps(rows, indent=2)


# ------------------------------------------------------------ sensitivity

@dataclass
class SensitivityRow:
    response: str
    term: str
    fixed_value: float
    summary: dict[str, dict[str, float]]
    odds_ratio: str
    spec: ModelSpec = field(repr=False, default=None)


def odds_ratio_gloss(spec: ModelSpec, response: str, term: Term, value: float, means: dict[str, float]) -> str:
    """Implied odds multiplier for the later factor of an interaction when the earlier one is 1."""
    if len(term.factors) != 2:
        return f"exp({value:g}) = {math.exp(value):.2f}x odds"
    a, b = term.factors
    main = Term((b,))
    name = f"{response}~{b}"
    if name in means:
        coef = means[name]
    else:
        coef = spec[response].fixed.get(main, 0.0)
    total = coef + value
    return (f"{b} 0->1 multiplies the odds of {response}=1 by exp({coef:.2f}{value:+.2f}) = "
            f"{math.exp(total):.2f} when {a}=1, vs exp({coef:.2f}) = {math.exp(coef):.2f} when {a}=0")


def sensitivity_scan(ds: PanelDataset, spec: ModelSpec, response: str, term: Term | str,
                     grid: Sequence[float], cfg: McmcConfig | None = None, jobs: int = 1) -> list[SensitivityRow]:
    """One fit per grid value with ``term`` frozen in ``response``'s model."""
    term = Term.parse(term) if isinstance(term, str) else term
    cfg = cfg or McmcConfig()
    rows = []
    for value in grid:
        s = spec.with_fixed(response, term, float(value))
        draws = run_mwg(ds, s, cfg, jobs=jobs)
        summ = draws.summary()
        means = summ["mean"].to_dict()
        rows.append(SensitivityRow(response, term.label, float(value),
                                   {n: summ.loc[n].to_dict() for n in summ.index},
                                   odds_ratio_gloss(s, response, term, float(value), means), s))
    return rows


def format_sensitivity(rows: Sequence[SensitivityRow]) -> str:
    names = list(rows[0].summary)
    head = f"{'fixed':>8}" + "".join(f"{n:>12}" for n in names)
    lines = [f"{rows[0].term} in {rows[0].response} model", head]
    for r in rows:
        lines.append(f"{r.fixed_value:>8g}" + "".join(f"{r.summary[n]['mean']:>12.3f}" for n in names))
    lines.append("")
    lines += [f"{r.fixed_value:g}: {r.odds_ratio}" for r in rows]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ convergence

@dataclass
class ConvergenceRow:
    name: str
    rhat: float
    ess_bulk: float
    ess_tail: float
    undefined: bool


def _split(chains: np.ndarray) -> np.ndarray:
    n = chains.shape[1] // 2
    return np.concatenate([chains[:, :n], chains[:, -n:]], axis=0)


def _rank_normal(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x.reshape(-1), method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat(chains: np.ndarray) -> float:
    m, n = chains.shape
    means = chains.mean(axis=1)
    w = chains.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return math.nan
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _ess(chains: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    m, n = chains.shape
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(chains - chains.mean(axis=1, keepdims=True), size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n + (chains.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    if var_plus == 0:
        return math.nan
    rho = 1 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair and forced monotone
    total, prev = 0.0, math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1 + 2 * total
    tau = max(tau, 1 / math.log10(m * n)) if m * n > 10 else max(tau, 1e-12)
    return float(m * n / tau)


def convergence_summary(draws: PosteriorDraws) -> list[ConvergenceRow]:
    """Rank-normalized split-R-hat and bulk/tail effective sample sizes."""
    n_chains, n_keep, n_par = draws.chains.shape
    if n_chains < 2:
        raise TooFewDraws("convergence summary needs at least two chains")
    if n_keep < 4:
        raise TooFewDraws(f"{n_keep} draws per chain; need at least 4")
    rows = []
    for j, name in enumerate(draws.names):
        x = _split(draws.chains[:, :, j])
        if np.ptp(x) == 0:
            rows.append(ConvergenceRow(name, math.nan, math.nan, math.nan, True))
            continue
        z = _rank_normal(x)
        med = np.median(x)
        zf = _rank_normal(np.abs(x - med))
        rhat = max(_rhat(z), _rhat(zf))
        q05, q95 = np.quantile(x, [0.05, 0.95])
        tail = min(_ess((x <= q05).astype(float)), _ess((x <= q95).astype(float)))
        rows.append(ConvergenceRow(name, rhat, _ess(z), tail, False))
    return rows


def format_convergence(rows: Sequence[ConvergenceRow]) -> str:
    lines = [f"{'parameter':<16}{'R-hat':>8}{'ESS bulk':>10}{'ESS tail':>10}"]
    for r in rows:
        rh = "undef" if r.undefined else f"{r.rhat:.3f}"
        eb = "-" if r.undefined else f"{r.ess_bulk:.0f}"
        et = "-" if r.undefined or not math.isfinite(r.ess_tail) else f"{r.ess_tail:.0f}"
        lines.append(f"{r.name:<16}{rh:>8}{eb:>10}{et:>10}")
    return "\n".join(lines) + "\n"
