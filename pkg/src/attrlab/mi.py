"""Multiple imputation from posterior draws and Rubin's combining rules."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .data import MISSING, Cohort, PanelDataset
from .errors import AutocorrelationTooHigh, InsufficientDraws
from .glm import compress_rows, newton_logistic
from .likelihood import CompletionTable
from .model import ConditionalModel, ModelSpec, parse_model_line
from .sampler import PosteriorDraws


class ImputationMode(str, enum.Enum):
    POnly = "POnly"
    PPlusR = "PPlusR"


def parse_mode(value) -> ImputationMode:
    key = str(getattr(value, "value", value)).replace("-", "").replace("+", "plus").lower()
    for m in ImputationMode:
        if m.value.lower() == key:
            return m
    raise ValueError(f"unknown imputation mode {value!r} (use POnly or PPlusR)")


@dataclass(frozen=True)
class CompletedDataset:
    mode: ImputationMode
    data: PanelDataset
    draw_index: int

    def __len__(self):
        return len(self.data)


# ------------------------------------------------------------ thinning

def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 0..max_lag (FFT). Constant series give zeros past lag 0."""
    x = np.asarray(x, float)
    n = len(x)
    xc = x - x.mean()
    var = float(xc @ xc)
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    if var == 0.0 or n < 2:
        return out
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    return acov / var


def max_autocorrelation(draws: PosteriorDraws, max_lag: int) -> np.ndarray:
    """Largest |acf| over parameters at each lag, averaging the acf across chains."""
    n_chains, n_keep, n_par = draws.chains.shape
    max_lag = min(max_lag, n_keep - 1)
    worst = np.zeros(max_lag + 1)
    for j in range(n_par):
        acf = np.mean([autocorrelation(draws.chains[c, :, j], max_lag) for c in range(n_chains)], axis=0)
        worst = np.maximum(worst, np.abs(acf))
    return worst


def select_draws(draws: PosteriorDraws, m: int, max_autocorr: float = 0.1) -> tuple[np.ndarray, int]:
    """Pick ``m`` draws spaced so that every parameter's lag autocorrelation is below ``max_autocorr``.

    Returns flat indices into ``draws.matrix`` and the spacing used. The
    spacing is the widest that fits m draws, and must be at least the
    smallest lag at which the threshold holds.
    """
    n_chains, n_keep, _ = draws.chains.shape
    if m < 2:
        raise ValueError("m must be at least 2")
    if n_chains * n_keep < m:
        raise InsufficientDraws(f"{n_chains * n_keep} retained draws cannot supply m={m} imputations")
    per_chain = math.ceil(m / n_chains)
    stride = n_keep // per_chain
    if stride < 1:
        raise InsufficientDraws(f"{n_keep} draws per chain cannot supply {per_chain} imputations each")
    worst = max_autocorrelation(draws, stride)
    ok = np.flatnonzero(worst[1:] < max_autocorr)
    if len(ok) == 0:
        raise AutocorrelationTooHigh(
            f"lag-{stride} autocorrelation {worst[stride]:.3f} >= {max_autocorr}; run a longer chain")
    idx = [c * n_keep + (n_keep - 1 - stride * j) for c in range(n_chains) for j in range(per_chain)]
    return np.array(sorted(idx[:m])), stride


# ------------------------------------------------------------ emission

def emit_imputations(draws: PosteriorDraws, ds: PanelDataset, spec: ModelSpec, m: int,
                     mode=ImputationMode.POnly, seed: int = 0, max_autocorr: float = 0.1,
                     indices: Sequence[int] | None = None) -> list[CompletedDataset]:
    """Completed datasets, one per selected posterior draw.

    Every case is completed for every draw, so the two modes share panel
    rows exactly; P-only then drops the refreshment rows.
    """
    mode = parse_mode(mode)
    if indices is None:
        indices, _ = select_draws(draws, m, max_autocorr)
    table = CompletionTable.for_imputation(ds, spec)
    rng = np.random.default_rng(seed)
    keep = ds.cohort_mask(Cohort.Panel) if mode is ImputationMode.POnly else np.ones(len(ds), bool)
    base = ds.subset(keep)
    out = []
    for idx in indices:
        theta = draws.theta(spec, int(idx))
        logp, _ = table.group_logprob(table.row_loglik(theta))
        vals = table.sample_cases(rng, logp) if table.n_groups else ds.values.copy()
        out.append(CompletedDataset(mode, base.with_values(vals[keep]), int(idx)))
    return out


# ------------------------------------------------------------ completed-data analysis

@dataclass
class CompletedFit:
    names: list[str]
    q: np.ndarray
    u: np.ndarray
    n_rows: int

    @property
    def dof(self) -> int:
        return self.n_rows - len(self.q)


def _formula_design(data: PanelDataset, model: ConditionalModel):
    cols = {c: data.x[:, i] for i, c in enumerate(data.covariate_names)}
    cols.update({v: data.values[:, i].astype(float) for i, v in enumerate(data.design.chain)})
    y = data.values[:, data.design.index(model.response)]
    d = np.ones((len(y), len(model.terms)))
    for j, t in enumerate(model.terms):
        for f in t.factors:
            if f not in cols:
                raise ValueError(f"formula uses unknown variable {f!r}")
            d[:, j] *= cols[f]
    return d, y


def fit_logistic_ml(completed: CompletedDataset | PanelDataset, formula: str | ConditionalModel) -> CompletedFit:
    """ML logistic regression on a completed dataset, e.g. ``"Y2 ~ 1 + X + Y1"``."""
    data = completed.data if isinstance(completed, CompletedDataset) else completed
    model = parse_model_line(formula) if isinstance(formula, str) else formula
    d, y = _formula_design(data, model)
    used = (y != MISSING) & np.all(~np.isnan(d), axis=1)
    for t in model.terms:
        for f in t.factors:
            if f in data.design.chain:
                used &= data.values[:, data.design.index(f)] != MISSING
    dd, yy, ww = compress_rows(d[used], y[used].astype(float))
    fit = newton_logistic(dd, yy, ww)
    return CompletedFit(model.names(), fit.coef, np.diag(fit.cov).copy(), int(used.sum()))


# ------------------------------------------------------------ combining

@dataclass
class MIResult:
    m: int
    q_bar: float
    b_m: float
    u_bar: float
    T_m: float
    nu_m: float
    nu_BR: float
    ci95: tuple[float, float]
    degenerate_between: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def barnard_rubin_dof(nu_m: float, b_m: float, T_m: float, m: int, nu_com: float | None) -> float:
    """Small-sample degrees of freedom; falls back to ``nu_m`` without a complete-data dof."""
    if nu_com is None or not math.isfinite(nu_com):
        return nu_m
    gamma = (1 + 1 / m) * b_m / T_m
    nu_obs = (nu_com + 1) / (nu_com + 3) * nu_com * (1 - gamma)
    if math.isinf(nu_m):
        return nu_obs
    return 1.0 / (1.0 / nu_m + 1.0 / nu_obs)


def rubin_combine(q: Sequence[float], u: Sequence[float], nu_com: float | None = None) -> MIResult:
    q = np.asarray(q, float)
    u = np.asarray(u, float)
    if q.shape != u.shape or q.ndim != 1:
        raise ValueError("q and u must be equal-length vectors")
    m = len(q)
    if m < 2:
        raise ValueError("need at least two completed-data estimates")
    q_bar = float(q.mean())
    # identical estimates (no imputed cells in the analysis) give exactly zero, not rounding noise
    b_m = 0.0 if np.ptp(q) == 0 else float(((q - q_bar) ** 2).sum() / (m - 1))
    u_bar = float(u.mean())
    T_m = (1 + 1 / m) * b_m + u_bar
    degenerate = b_m == 0.0
    try:
        nu_m = math.inf if degenerate else (m - 1) * (1 + u_bar / ((1 + 1 / m) * b_m)) ** 2
    except (OverflowError, ZeroDivisionError):
        nu_m = math.inf
    nu_br = math.inf if degenerate else barnard_rubin_dof(nu_m, b_m, T_m, m, nu_com)
    crit = stats.norm.ppf(0.975) if math.isinf(nu_br) else stats.t.ppf(0.975, nu_br)
    half = float(crit * math.sqrt(T_m))
    return MIResult(m, q_bar, b_m, u_bar, T_m, nu_m, nu_br, (q_bar - half, q_bar + half), degenerate)


def combine_fits(fits: Sequence[CompletedFit]) -> dict[str, MIResult]:
    """Rubin-combine every coefficient of a list of completed-data fits."""
    names = fits[0].names
    q = np.array([f.q for f in fits])
    u = np.array([f.u for f in fits])
    nu_com = float(fits[0].dof)
    return {n: rubin_combine(q[:, j], u[:, j], nu_com) for j, n in enumerate(names)}


def format_results(results: dict[str, MIResult]) -> str:
    lines = [f"{'parameter':<14}{'q_bar':>10}{'b_m':>11}{'u_bar':>11}{'T_m':>11}{'nu_BR':>10}  95% interval"]
    for name, r in results.items():
        nu = "inf" if math.isinf(r.nu_BR) else f"{r.nu_BR:.1f}"
        lines.append(f"{name:<14}{r.q_bar:>10.4f}{r.b_m:>11.3g}{r.u_bar:>11.3g}{r.T_m:>11.3g}{nu:>10}"
                     f"  ({r.ci95[0]:.4f}, {r.ci95[1]:.4f}){'  [b_m=0]' if r.degenerate_between else ''}")
    return "\n".join(lines) + "\n"
