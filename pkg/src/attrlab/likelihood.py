"""Chained-logistic likelihood and exact enumeration of latent binary cells.

The sampler never touches cases one at a time. Cases sharing covariates,
observed cells and latent pattern are exchangeable, so they are collapsed
into groups; each group is expanded into its 2^k completions and every
likelihood evaluation runs over those completion rows with frequency
weights. For binary covariates this shrinks 15,000 cases to a few dozen
rows without changing any probability.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .data import MISSING, CaseRecord, PanelDataset, StudyDesign
from .errors import IncompleteLatent, ZeroMass
from .model import ModelSpec

MAX_LATENT = 4


def bernoulli_loglik(y, eta):
    """log P(y | logit = eta) = y*eta - log(1 + e^eta), overflow-safe."""
    return np.multiply(y, eta) - np.logaddexp(0.0, eta)


class ParameterVector:
    """Free coefficients of a spec, one array per conditional model."""

    def __init__(self, spec: ModelSpec, blocks: Mapping[str, np.ndarray] | None = None):
        self.spec = spec
        self.blocks = {}
        for m in spec.chain:
            k = len(m.terms)
            b = np.zeros(k) if blocks is None or m.response not in blocks else np.asarray(blocks[m.response], float)
            if b.shape != (k,):
                raise ValueError(f"block {m.response} expects {k} coefficients, got {b.shape}")
            self.blocks[m.response] = b.copy()

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParameterVector":
        return cls(spec)

    @classmethod
    def from_flat(cls, spec: ModelSpec, vec: Sequence[float]) -> "ParameterVector":
        vec = np.asarray(vec, dtype=float)
        blocks, start = {}, 0
        for m in spec.chain:
            blocks[m.response] = vec[start:start + len(m.terms)]
            start += len(m.terms)
        if start != len(vec):
            raise ValueError(f"expected {start} values, got {len(vec)}")
        return cls(spec, blocks)

    @classmethod
    def from_dict(cls, spec: ModelSpec, values: Mapping[str, float]) -> "ParameterVector":
        """Unlisted coefficients default to 0; names look like ``"W1~Y2"``."""
        known = set(spec.param_names())
        unknown = [k for k in values if k not in known]
        if unknown:
            raise KeyError(f"unknown parameters {unknown}")
        return cls.from_flat(spec, [values.get(n, 0.0) for n in spec.param_names()])

    def names(self) -> list[str]:
        return self.spec.param_names()

    def flat(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([self.blocks[m.response] for m in self.spec.chain])

    def as_dict(self, include_fixed: bool = False) -> dict[str, float]:
        out = dict(zip(self.names(), self.flat().tolist()))
        if include_fixed:
            for m in self.spec.chain:
                for t, v in m.fixed.items():
                    out[f"{m.response}~{t.label}"] = float(v)
        return out

    def __repr__(self):
        return f"ParameterVector({self.as_dict()})"


@dataclass(frozen=True)
class CompiledBlock:
    response: str
    response_col: int
    term_cols: tuple[tuple[int, ...], ...]
    fixed_cols: tuple[tuple[int, ...], ...]
    fixed_values: np.ndarray

    def design(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Design matrix and fixed-term offset from stacked [x | chain values]."""
        n = len(z)
        d = np.ones((n, len(self.term_cols)))
        for j, cols in enumerate(self.term_cols):
            for c in cols:
                d[:, j] *= z[:, c]
        offset = np.zeros(n)
        for cols, v in zip(self.fixed_cols, self.fixed_values):
            col = np.full(n, v)
            for c in cols:
                col *= z[:, c]
            offset += col
        return d, offset


def compile_spec(spec: ModelSpec, covariate_names: Sequence[str]) -> list[CompiledBlock]:
    cov_pos = {c: i for i, c in enumerate(covariate_names)}
    p = len(covariate_names)
    missing = [c for c in spec.covariates() if c not in cov_pos]
    if missing:
        raise ValueError(f"spec uses covariates {missing} absent from the dataset {tuple(covariate_names)}")
    chain_pos = {v: p + i for i, v in enumerate(spec.design.chain)}
    col = {**cov_pos, **chain_pos}
    blocks = []
    for m in spec.chain:
        blocks.append(CompiledBlock(
            m.response,
            spec.design.index(m.response),
            tuple(tuple(col[f] for f in t.factors) for t in m.terms),
            tuple(tuple(col[f] for f in t.factors) for t in m.fixed),
            np.array(list(m.fixed.values()), dtype=float),
        ))
    return blocks


def required_missing(values: np.ndarray) -> np.ndarray:
    """Missing cells preceding the last observed cell of their row.

    Missing cells after the last observed one integrate out of the chain and
    never need to be imputed for inference.
    """
    obs = values != MISSING
    idx = np.arange(values.shape[1])
    last = np.where(obs.any(axis=1), values.shape[1] - 1 - np.argmax(obs[:, ::-1], axis=1), -1)
    return ~obs & (idx[None, :] < last[:, None])


class CompletionTable:
    """Grouped cases expanded into all completions of their enumerated cells.

    Parameters
    ----------
    x, values : per-case covariates and chain values.
    enumerate_mask : cells to enumerate; observed cells in the mask are
        treated as unknown (used for predictive replication).
    """

    def __init__(self, spec: ModelSpec, covariate_names: Sequence[str], x: np.ndarray,
                 values: np.ndarray, enumerate_mask: np.ndarray):
        self.spec = spec
        self.blocks = compile_spec(spec, covariate_names)
        x = np.asarray(x, dtype=float).reshape(len(values), -1)
        values = np.where(enumerate_mask, MISSING, values).astype(np.int8)
        k_per_case = enumerate_mask.sum(axis=1)
        if len(values) and k_per_case.max() > MAX_LATENT:
            raise ValueError(f"at most {MAX_LATENT} latent cells per case, got {k_per_case.max()}")
        self.n_cases = len(values)
        self.n_chain = values.shape[1]
        p = x.shape[1]

        key = np.hstack([x, values.astype(float), enumerate_mask.astype(float)])
        if len(key):
            uniq, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        else:
            uniq, inv, cnt = np.zeros((0, key.shape[1])), np.zeros(0, int), np.zeros(0, int)
        self.case_group = inv.reshape(-1)
        self.group_counts = cnt.astype(np.int64)
        g_x = uniq[:, :p]
        g_vals = uniq[:, p:p + self.n_chain].astype(np.int8)
        g_mask = uniq[:, p + self.n_chain:].astype(bool)
        n_groups = len(uniq)

        rows_x, rows_v, rows_g, rows_s = [], [], [], []
        patterns = np.unique(g_mask, axis=0) if n_groups else np.zeros((0, self.n_chain), bool)
        for pat in patterns:
            gsel = np.flatnonzero((g_mask == pat).all(axis=1))
            cols = np.flatnonzero(pat)
            k = len(cols)
            bits = (np.arange(2 ** k)[:, None] >> np.arange(k)[None, :]) & 1
            v = np.repeat(g_vals[gsel], 2 ** k, axis=0)
            if k:
                v[:, cols] = np.tile(bits, (len(gsel), 1))
            rows_v.append(v)
            rows_x.append(np.repeat(g_x[gsel], 2 ** k, axis=0))
            rows_g.append(np.repeat(gsel, 2 ** k))
            rows_s.append(np.tile(np.arange(2 ** k), len(gsel)))
        if rows_v:
            self.row_values = np.concatenate(rows_v)
            self.row_x = np.concatenate(rows_x)
            self.row_group = np.concatenate(rows_g)
            self.row_slot = np.concatenate(rows_s)
        else:
            self.row_values = np.zeros((0, self.n_chain), np.int8)
            self.row_x = np.zeros((0, p))
            self.row_group = np.zeros(0, int)
            self.row_slot = np.zeros(0, int)
        self.n_rows = len(self.row_values)
        self.n_groups = n_groups
        self.k_max = int(2 ** g_mask.sum(axis=1).max()) if n_groups else 1
        self.group_size = np.bincount(self.row_group, minlength=n_groups)
        self.slot_row = np.full((n_groups, self.k_max), -1, dtype=np.int64)
        self.slot_row[self.row_group, self.row_slot] = np.arange(self.n_rows)

        z = np.hstack([self.row_x, self.row_values.astype(float)])
        self.block_rows, self.block_design, self.block_offset, self.block_y = [], [], [], []
        for b in self.blocks:
            rows = np.flatnonzero(self.row_values[:, b.response_col] != MISSING)
            d, off = b.design(z[rows])
            self.block_rows.append(rows)
            self.block_design.append(d)
            self.block_offset.append(off)
            self.block_y.append(self.row_values[rows, b.response_col].astype(float))

    @classmethod
    def for_inference(cls, ds: PanelDataset, spec: ModelSpec) -> "CompletionTable":
        return cls(spec, ds.covariate_names, ds.x, ds.values, required_missing(ds.values))

    @classmethod
    def for_imputation(cls, ds: PanelDataset, spec: ModelSpec) -> "CompletionTable":
        return cls(spec, ds.covariate_names, ds.x, ds.values, ds.values == MISSING)

    def block_row_loglik(self, b: int, beta: np.ndarray) -> np.ndarray:
        eta = self.block_design[b] @ beta + self.block_offset[b]
        return bernoulli_loglik(self.block_y[b], eta)

    def row_loglik(self, theta: ParameterVector) -> np.ndarray:
        total = np.zeros(self.n_rows)
        for i, b in enumerate(self.blocks):
            total[self.block_rows[i]] += self.block_row_loglik(i, theta.blocks[b.response])
        return total

    def group_logprob(self, row_total: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Normalized completion log-probabilities, padded to (groups, k_max)."""
        pad = np.full((self.n_groups, self.k_max), -np.inf)
        pad[self.row_group, self.row_slot] = row_total
        top = pad.max(axis=1) if self.n_groups else np.zeros(0)
        with np.errstate(invalid="ignore", divide="ignore"):
            lse = top + np.log(np.exp(pad - top[:, None]).sum(axis=1))
        if self.n_groups and not np.isfinite(lse).all():
            raise ZeroMass("every completion of some case has zero probability")
        return pad - lse[:, None], lse

    def observed_loglik(self, theta: ParameterVector) -> float:
        """Log-likelihood with enumerated cells summed out."""
        _, lse = self.group_logprob(self.row_loglik(theta))
        return float(self.group_counts @ lse)

    def sample_weights(self, rng: np.random.Generator, logp: np.ndarray) -> np.ndarray:
        """Draw every case's completion; return per-row case counts."""
        p = np.exp(logp)
        p /= p.sum(axis=1, keepdims=True)
        counts = rng.multinomial(self.group_counts, p)
        return counts[self.row_group, self.row_slot].astype(float)

    def sample_cases(self, rng: np.random.Generator, logp: np.ndarray) -> np.ndarray:
        """Draw each case's completion independently; return completed values."""
        cp = np.cumsum(np.exp(logp), axis=1)
        cp /= cp[:, -1:]
        u = rng.random(self.n_cases)
        slot = (cp[self.case_group] < u[:, None]).sum(axis=1)
        slot = np.minimum(slot, self.group_size[self.case_group] - 1)
        return self.row_values[self.slot_row[self.case_group, slot]]


def _completed(ds: PanelDataset, latent) -> np.ndarray:
    vals = ds.values.astype(np.int8).copy()
    if latent is not None:
        latent = np.asarray(latent, dtype=np.int8)
        if latent.shape != vals.shape:
            raise ValueError(f"latent shape {latent.shape} != {vals.shape}")
        clash = (vals != MISSING) & (latent != MISSING) & (latent != vals)
        if clash.any():
            raise ValueError("latent values contradict observed cells")
        fill = (vals == MISSING) & (latent != MISSING)
        vals[fill] = latent[fill]
    gaps = required_missing(vals)
    if gaps.any():
        i, j = np.argwhere(gaps)[0]
        raise IncompleteLatent(f"case {ds.case_ids[i]}: {ds.design.chain[j]} needs a latent value")
    return vals


def _block_terms(ds, spec, vals):
    z = np.hstack([ds.x, vals.astype(float)])
    for b in compile_spec(spec, ds.covariate_names):
        rows = np.flatnonzero(vals[:, b.response_col] != MISSING)
        d, off = b.design(z[rows])
        yield b, d, off, vals[rows, b.response_col].astype(float)


def joint_loglik(ds: PanelDataset, spec: ModelSpec, theta: ParameterVector, latent=None) -> float:
    """Complete-data log-likelihood over every defined chain response.

    ``latent`` is an array shaped like ``ds.values`` holding values for
    missing cells (``MISSING`` elsewhere). Cells after a case's last defined
    variable are summed out and may be left missing.
    """
    vals = _completed(ds, latent)
    total = 0.0
    for b, d, off, y in _block_terms(ds, spec, vals):
        total += float(bernoulli_loglik(y, d @ theta.blocks[b.response] + off).sum())
    return total


def loglik_gradient(ds: PanelDataset, spec: ModelSpec, theta: ParameterVector, latent=None) -> np.ndarray:
    """Gradient of :func:`joint_loglik` in the free coefficients (flat order)."""
    vals = _completed(ds, latent)
    parts = []
    for b, d, off, y in _block_terms(ds, spec, vals):
        parts.append(d.T @ (y - expit(d @ theta.blocks[b.response] + off)))
    return np.concatenate(parts) if parts else np.zeros(0)


def observed_loglik(ds: PanelDataset, spec: ModelSpec, theta: ParameterVector) -> float:
    """Observed-data log-likelihood (latent cells summed out)."""
    return CompletionTable.for_inference(ds, spec).observed_loglik(theta)


@dataclass
class LatentConditional:
    variables: tuple[str, ...]
    completions: np.ndarray
    probs: np.ndarray

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in c): float(p) for c, p in zip(self.completions, self.probs)}


def case_values(case: CaseRecord, design: StudyDesign) -> np.ndarray:
    ys = [c for c in design.outcome_columns if c.startswith("Y")]
    ws = [c for c in design.outcome_columns if c.startswith("W")]
    lookup = dict(zip(ys, case.y)) | dict(zip(ws, case.w))
    return np.array([lookup[v] for v in design.chain], dtype=np.int8)


def latent_full_conditional(case: CaseRecord, spec: ModelSpec, theta: ParameterVector,
                            covariate_names: Sequence[str] = (), include_trailing: bool = True
                            ) -> LatentConditional:
    """Exact discrete conditional of a case's missing chain cells.

    With ``include_trailing=False`` only cells the sampler needs (those
    preceding the case's last observed variable) are enumerated.
    """
    vals = case_values(case, spec.design)[None, :]
    mask = (vals == MISSING) if include_trailing else required_missing(vals)
    if mask.sum() > MAX_LATENT:
        raise ValueError(f"case {case.case_id} has {mask.sum()} latent cells (max {MAX_LATENT})")
    x = np.asarray(case.x, dtype=float)[None, :]
    table = CompletionTable(spec, covariate_names, x, vals, mask)
    logp, _ = table.group_logprob(table.row_loglik(theta))
    cols = np.flatnonzero(mask[0])
    rows = table.slot_row[0][: table.group_size[0]]
    return LatentConditional(
        tuple(spec.design.chain[c] for c in cols),
        table.row_values[rows][:, cols].astype(int),
        np.exp(logp[0, : len(rows)]),
    )
