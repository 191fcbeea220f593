"""Metropolis-within-Gibbs with exact data augmentation for latent binaries.

Each sweep (i) redraws every case's missing chain cells from their exact
full conditional and (ii) updates each conditional model's coefficients
with a Gaussian random-walk Metropolis step against the completed-data
likelihood plus a normal prior.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.linalg import block_diag as scipy_block_diag

from .data import PanelDataset
from .errors import NonFinitePosterior, RankDeficient, Separation
from .glm import newton_logistic
from .likelihood import CompletionTable, ParameterVector
from .model import ModelSpec, validate_identified


@dataclass
class McmcConfig:
    iterations: int = 10_000
    burn_in_fraction: float = 0.5
    proposal_scale: float | Mapping[str, float] | None = None
    adapt: bool = True
    seed: int = 0
    n_chains: int = 1
    prior_sd: float = 5.0
    init: str = "zero"
    target_accept: float = 0.3
    block_steps: int = 1
    marginal_steps: int = 2

    def __post_init__(self):
        if self.iterations < 2:
            raise ValueError("iterations must be >= 2")
        if not 0 <= self.burn_in_fraction < 1:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.block_steps < 1 or self.marginal_steps < 0:
            raise ValueError("block_steps must be >= 1 and marginal_steps >= 0")
        if self.init not in ("zero", "ml"):
            raise ValueError("init must be 'zero' or 'ml'")
        if isinstance(self.proposal_scale, (int, float)) and self.proposal_scale <= 0:
            raise ValueError("proposal_scale must be positive")
        if isinstance(self.proposal_scale, Mapping) and any(v <= 0 for v in self.proposal_scale.values()):
            raise ValueError("proposal_scale must be positive")

    @property
    def n_burn(self) -> int:
        return int(self.iterations * self.burn_in_fraction)

    @property
    def n_keep(self) -> int:
        return self.iterations - self.n_burn

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(self.proposal_scale, Mapping):
            d["proposal_scale"] = dict(self.proposal_scale)
        return d


@dataclass
class PosteriorDraws:
    """Retained draws, shape (n_chains, n_keep, n_params)."""

    names: list[str]
    chains: np.ndarray
    acceptance: dict[str, list[float]]
    config: dict = field(default_factory=dict)
    seed: int = 0
    timing: float = 0.0

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.chains.reshape(-1, self.chains.shape[-1])

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.names.index(name)]

    def mean(self) -> pd.Series:
        return pd.Series(self.matrix.mean(axis=0), index=self.names)

    def summary(self, level: float = 0.95) -> pd.DataFrame:
        m = self.matrix
        lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
        return pd.DataFrame({
            "mean": m.mean(axis=0),
            "sd": m.std(axis=0, ddof=1) if len(m) > 1 else np.zeros(m.shape[1]),
            "lower": np.quantile(m, lo, axis=0),
            "upper": np.quantile(m, hi, axis=0),
        }, index=self.names)

    def theta(self, spec: ModelSpec, index: int) -> ParameterVector:
        return ParameterVector.from_flat(spec, self.matrix[index])

    def to_frame(self) -> pd.DataFrame:
        n_chains, n_keep, _ = self.chains.shape
        df = pd.DataFrame(self.matrix, columns=self.names)
        df.insert(0, "draw", np.tile(np.arange(n_keep), n_chains))
        df.insert(0, "chain", np.repeat(np.arange(n_chains), n_keep))
        return df

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.to_frame().to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
        return buf.getvalue()

    def manifest(self) -> dict:
        return {"config": self.config, "seed": self.seed, "acceptance": self.acceptance,
                "n_chains": self.n_chains, "n_keep": int(self.chains.shape[1]),
                "timing_seconds": self.timing}

    @classmethod
    def from_csv(cls, text_or_path, manifest: dict | None = None) -> "PosteriorDraws":
        src = io.StringIO(text_or_path) if "\n" in str(text_or_path) else text_or_path
        df = pd.read_csv(src, float_precision="round_trip")
        names = [c for c in df.columns if c not in ("chain", "draw")]
        n_chains = int(df["chain"].max()) + 1
        chains = np.stack([df.loc[df["chain"] == c, names].to_numpy(float) for c in range(n_chains)])
        manifest = manifest or {}
        return cls(names, chains, manifest.get("acceptance", {}), manifest.get("config", {}),
                   manifest.get("seed", 0), manifest.get("timing_seconds", 0.0))


def _initial_blocks(table: CompletionTable, spec: ModelSpec, how: str) -> list[np.ndarray]:
    betas = [np.zeros(len(m.terms)) for m in spec.chain]
    if how == "zero":
        return betas
    complete = table.group_size[table.row_group] == 1
    weights = table.group_counts[table.row_group].astype(float)
    for i in range(len(table.blocks)):
        rows = table.block_rows[i]
        keep = complete[rows]
        try:
            fit = newton_logistic(table.block_design[i][keep], table.block_y[i][keep],
                                  weights[rows][keep], table.block_offset[i][keep])
            betas[i] = fit.coef
        except (RankDeficient, Separation):
            pass
    return betas


def _proposal_chol(d, y_off, beta, w, prior_var):
    eta = d @ beta + y_off
    p = 1.0 / (1.0 + np.exp(-eta))
    info = (d * (w * p * (1 - p))[:, None]).T @ d + np.eye(len(beta)) / prior_var
    cov = np.linalg.inv(info)
    return np.linalg.cholesky(cov * 2.38 ** 2 / len(beta))


def _block_scales(cfg: McmcConfig, spec: ModelSpec) -> list[float]:
    if cfg.proposal_scale is None:
        return [1.0] * len(spec.chain)
    if isinstance(cfg.proposal_scale, Mapping):
        return [float(cfg.proposal_scale.get(m.response, 1.0)) for m in spec.chain]
    return [float(cfg.proposal_scale)] * len(spec.chain)


class _Moments:
    """Welford running mean/covariance."""

    def __init__(self, k):
        self.n, self.mean, self.m2 = 0, np.zeros(k), np.zeros((k, k))

    def push(self, v):
        self.n += 1
        delta = v - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, v - self.mean)

    def chol(self, k):
        cov = self.m2 / (self.n - 1) * 2.38 ** 2 / k + 1e-10 * np.eye(k)
        return np.linalg.cholesky(cov)


def run_chain(table: CompletionTable, spec: ModelSpec, cfg: McmcConfig, seed: int):
    """One sequential chain. Returns (retained draws, acceptance rates by block)."""
    latent_rng, mh_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    nb = len(table.blocks)
    prior_var = cfg.prior_sd ** 2
    betas = _initial_blocks(table, spec, cfg.init)
    sizes = [len(b) for b in betas]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n_par = int(offsets[-1])
    n_burn, n_keep = cfg.n_burn, cfg.n_keep
    steps, msteps = cfg.block_steps, cfg.marginal_steps
    out = np.empty((n_keep, n_par))

    def scatter(lls):
        tot = np.zeros(table.n_rows)
        for i in range(nb):
            tot[table.block_rows[i]] += lls[i]
        return tot

    def marginal_logpost(tot, flat):
        _, lse = table.group_logprob(tot)
        return float(table.group_counts @ lse) - 0.5 * float(flat @ flat) / prior_var

    ll_rows = [table.block_row_loglik(i, betas[i]) for i in range(nb)]
    total = scatter(ll_rows)
    logp, _ = table.group_logprob(total)
    w = table.sample_weights(latent_rng, logp)

    chols = []
    for i in range(nb):
        rows = table.block_rows[i]
        chols.append(_proposal_chol(table.block_design[i], table.block_offset[i], betas[i], w[rows], prior_var)
                     if sizes[i] else np.zeros((0, 0)))
    log_scale = np.log(_block_scales(cfg, spec))
    m_chol = scipy_block_diag(*chols) if n_par else np.zeros((0, 0))
    m_log_scale = 0.0
    accepted = np.zeros(nb)
    m_accepted = 0
    noise = [mh_rng.standard_normal((cfg.iterations, steps, k)) for k in sizes]
    log_u = np.log(mh_rng.random((cfg.iterations, nb, steps)))
    m_noise = mh_rng.standard_normal((cfg.iterations, msteps, n_par))
    m_log_u = np.log(mh_rng.random((cfg.iterations, msteps)))
    adapt_start = n_burn // 5
    block_mom = [_Moments(k) for k in sizes]
    flat_mom = _Moments(n_par)

    for it in range(cfg.iterations):
        burning = it < n_burn
        # (i) latent cells from their exact full conditionals
        logp, _ = table.group_logprob(total)
        w = table.sample_weights(latent_rng, logp)
        # (ii) random-walk Metropolis per conditional model on the completed data
        for i in range(nb):
            if sizes[i] == 0:
                continue
            rows = table.block_rows[i]
            wb = w[rows]
            beta, ll = betas[i], ll_rows[i]
            cur = float(wb @ ll) - 0.5 * float(beta @ beta) / prior_var
            if not math.isfinite(cur):
                raise NonFinitePosterior(f"log posterior of block {spec.chain[i].response} is {cur}")
            for s in range(steps):
                prop = beta + math.exp(log_scale[i]) * (chols[i] @ noise[i][it, s])
                llp = table.block_row_loglik(i, prop)
                new = float(wb @ llp) - 0.5 * float(prop @ prop) / prior_var
                log_ratio = new - cur if math.isfinite(new) else -math.inf
                if log_u[it, i, s] < log_ratio:
                    beta, ll, cur = prop, llp, new
                    accepted[i] += not burning
                if burning and cfg.adapt:
                    log_scale[i] += (math.exp(min(log_ratio, 0.0)) - cfg.target_accept) / (it + 1) ** 0.6
            if beta is not betas[i]:
                total[rows] += ll - ll_rows[i]
                betas[i], ll_rows[i] = beta, ll
        # optional joint step with the latent cells summed out
        if msteps:
            flat = np.concatenate(betas)
            cur = marginal_logpost(total, flat)
            for s in range(msteps):
                prop = flat + math.exp(m_log_scale) * (m_chol @ m_noise[it, s])
                pb = [prop[offsets[i]:offsets[i + 1]] for i in range(nb)]
                pll = [table.block_row_loglik(i, pb[i]) for i in range(nb)]
                ptot = scatter(pll)
                new = marginal_logpost(ptot, prop)
                log_ratio = new - cur if math.isfinite(new) else -math.inf
                if m_log_u[it, s] < log_ratio:
                    flat, betas, ll_rows, total, cur = prop, pb, pll, ptot, new
                    m_accepted += not burning
                if burning and cfg.adapt:
                    m_log_scale += (math.exp(min(log_ratio, 0.0)) - cfg.target_accept) / (it + 1) ** 0.6
        if burning and cfg.adapt and it >= adapt_start:
            for i in range(nb):
                block_mom[i].push(betas[i])
            flat_mom.push(np.concatenate(betas))
            if flat_mom.n >= 200 and flat_mom.n % 200 == 0:
                for i in range(nb):
                    if sizes[i]:
                        try:
                            chols[i] = block_mom[i].chol(sizes[i])
                            log_scale[i] = 0.0
                        except np.linalg.LinAlgError:
                            pass
                if msteps and n_par:
                    try:
                        m_chol = flat_mom.chol(n_par)
                        m_log_scale = 0.0
                    except np.linalg.LinAlgError:
                        pass
        if not burning and n_par:
            out[it - n_burn] = np.concatenate(betas)
    rates = {m.response: accepted[i] / max(n_keep * steps, 1) for i, m in enumerate(spec.chain)}
    if msteps:
        rates["marginal"] = m_accepted / max(n_keep * msteps, 1)
    return out, rates


def _chain_task(ds, spec, cfg, seed):
    table = CompletionTable.for_inference(ds, spec)
    return run_chain(table, spec, cfg, seed)


def run_mwg(ds: PanelDataset, spec: ModelSpec, cfg: McmcConfig | None = None, jobs: int = 1) -> PosteriorDraws:
    """Fit ``spec`` to ``ds``; chain c uses seed ``cfg.seed + c``."""
    cfg = cfg or McmcConfig()
    validate_identified(spec)
    t0 = time.perf_counter()
    seeds = [cfg.seed + c for c in range(cfg.n_chains)]
    if jobs > 1 and cfg.n_chains > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs)(delayed(_chain_task)(ds, spec, cfg, s) for s in seeds)
    else:
        table = CompletionTable.for_inference(ds, spec)
        results = [run_chain(table, spec, cfg, s) for s in seeds]
    chains = np.stack([r[0] for r in results])
    acceptance = {k: [float(r[1][k]) for r in results] for k in results[0][1]}
    return PosteriorDraws(spec.param_names(), chains, acceptance, cfg.to_dict(), cfg.seed,
                          time.perf_counter() - t0)


def manifest_json(draws: PosteriorDraws) -> str:
    return json.dumps(draws.manifest(), indent=2, sort_keys=True)
