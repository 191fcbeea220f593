"""Panel + refreshment-sample data model, CSV ingestion and validation.

Cell values are stored as int8 in chain order (Y1, Y2, W1[, Y3, W2]) with
``MISSING = -1``. Each missing cell also carries a flag saying whether it is
missing by design (structural) or because of attrition.
"""
from __future__ import annotations

import csv
import enum
import io
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InconsistentIndicator, MalformedFile, PatternViolation

MISSING = -1
MISSING_TOKEN = "?"

TWO_WAVE_CHAIN = ("Y1", "Y2", "W1")
THREE_WAVE_CHAIN = ("Y1", "Y2", "W1", "Y3", "W2")


class Variant(str, enum.Enum):
    TwoWave = "TwoWave"
    ThreeMonotoneNoFollow = "ThreeMonotoneNoFollow"
    ThreeReturnersNoFollow = "ThreeReturnersNoFollow"
    ThreeMonotoneFollow = "ThreeMonotoneFollow"
    ThreeReturnersFollow = "ThreeReturnersFollow"

    @property
    def returners(self) -> bool:
        return self in (Variant.ThreeReturnersNoFollow, Variant.ThreeReturnersFollow)

    @property
    def follow_up(self) -> bool:
        return self in (Variant.ThreeMonotoneFollow, Variant.ThreeReturnersFollow)


_VARIANT_ALIASES = {
    "two_wave": Variant.TwoWave,
    "three_monotone_no_follow": Variant.ThreeMonotoneNoFollow,
    "three_returners_no_follow": Variant.ThreeReturnersNoFollow,
    "three_monotone_follow": Variant.ThreeMonotoneFollow,
    "three_returners_follow": Variant.ThreeReturnersFollow,
}


class Cohort(str, enum.Enum):
    Panel = "Panel"
    R1 = "R1"
    R2 = "R2"


COHORT_CODES = {Cohort.Panel: 0, Cohort.R1: 1, Cohort.R2: 2}
CODE_COHORTS = {v: k for k, v in COHORT_CODES.items()}


class CellStatus(str, enum.Enum):
    OBSERVABLE = "observable"
    STRUCTURAL = "structural"


@dataclass(frozen=True)
class StudyDesign:
    n_waves: int
    variant: Variant

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        expected = 2 if variant is Variant.TwoWave else 3
        if self.n_waves != expected:
            raise ValueError(f"variant {variant.value} requires n_waves={expected}, got {self.n_waves}")

    @classmethod
    def from_variant(cls, variant: Variant | str) -> "StudyDesign":
        variant = parse_variant(variant)
        return cls(2 if variant is Variant.TwoWave else 3, variant)

    @property
    def chain(self) -> tuple[str, ...]:
        return TWO_WAVE_CHAIN if self.n_waves == 2 else THREE_WAVE_CHAIN

    @property
    def cohorts(self) -> tuple[Cohort, ...]:
        if self.n_waves == 2:
            return (Cohort.Panel, Cohort.R1)
        return (Cohort.Panel, Cohort.R1, Cohort.R2)

    @property
    def outcome_columns(self) -> tuple[str, ...]:
        """File column order: y1, y2[, y3], w1[, w2]."""
        if self.n_waves == 2:
            return ("Y1", "Y2", "W1")
        return ("Y1", "Y2", "Y3", "W1", "W2")

    def index(self, var: str) -> int:
        return self.chain.index(var)

    def pattern_table(self) -> dict[tuple[Cohort, str], CellStatus]:
        """Which variables a cohort can ever observe under this design.

        Observable cells may still be missing through attrition; structural
        cells are never observed.
        """
        table = {}
        for cohort in (Cohort.Panel, Cohort.R1, Cohort.R2):
            for var in THREE_WAVE_CHAIN:
                table[cohort, var] = CellStatus.STRUCTURAL
        if Cohort.Panel in self.cohorts:
            for var in self.chain:
                table[Cohort.Panel, var] = CellStatus.OBSERVABLE
        table[Cohort.R1, "Y2"] = CellStatus.OBSERVABLE
        if self.n_waves == 3:
            table[Cohort.R2, "Y3"] = CellStatus.OBSERVABLE
            if self.variant.follow_up:
                table[Cohort.R1, "Y3"] = CellStatus.OBSERVABLE
                table[Cohort.R1, "W2"] = CellStatus.OBSERVABLE
        return table

    def to_text(self) -> str:
        return f"n_waves = {self.n_waves}\nvariant = {self.variant.value}\n"


def parse_variant(value: Variant | str) -> Variant:
    if isinstance(value, Variant):
        return value
    key = str(value).strip()
    if key in Variant.__members__:
        return Variant[key]
    alias = key.lower().replace("-", "_")
    if alias in _VARIANT_ALIASES:
        return _VARIANT_ALIASES[alias]
    raise ValueError(f"unknown design variant {value!r}")


def load_design(path_or_name: str | os.PathLike) -> StudyDesign:
    """Read a design descriptor file, or accept a bare variant name."""
    text = str(path_or_name)
    if not os.path.exists(text):
        return StudyDesign.from_variant(text)
    fields_ = {}
    for raw in Path(text).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"^(\w+)\s*[:=]\s*(\S+)$", line)
        if not m:
            raise MalformedFile(f"bad design line: {raw!r}")
        fields_[m.group(1).lower()] = m.group(2)
    if "variant" not in fields_:
        raise MalformedFile("design descriptor lacks 'variant'")
    variant = parse_variant(fields_["variant"])
    n_waves = int(fields_.get("n_waves", 2 if variant is Variant.TwoWave else 3))
    return StudyDesign(n_waves, variant)


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    cohort: Cohort
    x: tuple[float, ...]
    y: tuple[int, ...]
    w: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Immutable collection of cases.

    Attributes
    ----------
    values : (N, len(chain)) int8, chain order, ``MISSING`` where unobserved.
    structural : (N, len(chain)) bool, True where a cell is missing by design.
    truth : optional complete pre-mask values (simulated data only).
    """

    design: StudyDesign
    case_ids: tuple[str, ...]
    cohort: np.ndarray
    x: np.ndarray
    values: np.ndarray
    structural: np.ndarray
    covariate_names: tuple[str, ...] = ()
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("cohort", "x", "values", "structural", "truth"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.case_ids)

    @property
    def chain(self) -> tuple[str, ...]:
        return self.design.chain

    @property
    def attrition(self) -> np.ndarray:
        return (self.values == MISSING) & ~self.structural

    def column(self, var: str) -> np.ndarray:
        return self.values[:, self.design.index(var)]

    def cohort_mask(self, cohort: Cohort) -> np.ndarray:
        return self.cohort == COHORT_CODES[Cohort(cohort)]

    def records(self) -> Iterator[CaseRecord]:
        ycols = [self.design.index(v) for v in self.design.outcome_columns if v.startswith("Y")]
        wcols = [self.design.index(v) for v in self.design.outcome_columns if v.startswith("W")]
        for i, cid in enumerate(self.case_ids):
            yield CaseRecord(
                cid,
                CODE_COHORTS[int(self.cohort[i])],
                tuple(float(v) for v in self.x[i]),
                tuple(int(self.values[i, c]) for c in ycols),
                tuple(int(self.values[i, c]) for c in wcols),
            )

    def subset(self, mask: np.ndarray) -> "PanelDataset":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return PanelDataset(
            self.design,
            tuple(self.case_ids[i] for i in idx),
            self.cohort[idx].copy(),
            self.x[idx].copy(),
            self.values[idx].copy(),
            self.structural[idx].copy(),
            self.covariate_names,
            None if self.truth is None else self.truth[idx].copy(),
        )

    def with_values(self, values: np.ndarray) -> "PanelDataset":
        """Copy sharing everything but the cell values (structural flags kept)."""
        return PanelDataset(self.design, self.case_ids, self.cohort, self.x,
                            np.asarray(values, dtype=np.int8), self.structural,
                            self.covariate_names, self.truth)


def classify_cells(design: StudyDesign, cohort_codes: np.ndarray, values: np.ndarray,
                   case_ids: Sequence[str] | None = None) -> np.ndarray:
    """Validate observation patterns and return the structural-missing mask.

    Raises PatternViolation / InconsistentIndicator on the first bad case.
    """
    n = len(values)
    ids = case_ids if case_ids is not None else [str(i) for i in range(n)]
    chain = design.chain
    col = {v: i for i, v in enumerate(chain)}
    obs = values != MISSING
    structural = np.zeros_like(obs)
    allowed = design.pattern_table()
    allowed_codes = {COHORT_CODES[c] for c in design.cohorts}

    bad_cohort = ~np.isin(cohort_codes, list(allowed_codes))
    if bad_cohort.any():
        i = int(np.flatnonzero(bad_cohort)[0])
        raise PatternViolation(
            f"case {ids[i]}: cohort {CODE_COHORTS[int(cohort_codes[i])].value} not part of {design.variant.value}")

    for cohort in design.cohorts:
        rows = cohort_codes == COHORT_CODES[cohort]
        if not rows.any():
            continue
        for var in chain:
            if allowed[cohort, var] is CellStatus.STRUCTURAL:
                hit = rows & obs[:, col[var]]
                if hit.any():
                    i = int(np.flatnonzero(hit)[0])
                    raise PatternViolation(
                        f"case {ids[i]}: {var} observed but {cohort.value} never observes it under {design.variant.value}")
                structural[rows, col[var]] = True

    def require(mask, msg, exc=PatternViolation):
        if mask.any():
            i = int(np.flatnonzero(mask)[0])
            raise exc(f"case {ids[i]}: {msg}")

    def indicator_rule(rows, w, y, cohort_label):
        wc, yc = col[w], col[y]
        require(rows & obs[:, wc] & (values[:, wc] == 1) & ~obs[:, yc],
                f"{w}=1 but {y} missing ({cohort_label})", InconsistentIndicator)
        require(rows & obs[:, wc] & (values[:, wc] == 0) & obs[:, yc],
                f"{w}=0 but {y} observed ({cohort_label})", InconsistentIndicator)

    panel = cohort_codes == COHORT_CODES[Cohort.Panel]
    require(panel & ~obs[:, col["Y1"]], "Y1 must be observed for Panel cases")
    require(panel & ~obs[:, col["W1"]], "W1 must be observed for Panel cases")
    indicator_rule(panel, "W1", "Y2", "Panel")

    r1 = cohort_codes == COHORT_CODES[Cohort.R1]
    require(r1 & ~obs[:, col["Y2"]], "Y2 must be observed for R1 cases")

    if design.n_waves == 3:
        w1, w2, y3 = col["W1"], col["W2"], col["Y3"]
        if design.variant.returners:
            require(panel & ~obs[:, w2], "W2 must be observed for Panel cases in a returners design")
        else:
            dropped = panel & (values[:, w1] == 0)
            require(dropped & (obs[:, w2] | obs[:, y3]),
                    "W1=0 case observed at wave 3 in a monotone design")
            structural[dropped, w2] = True
            structural[dropped, y3] = True
            require(panel & (values[:, w1] == 1) & ~obs[:, w2], "W1=1 Panel case lacks W2")
        indicator_rule(panel, "W2", "Y3", "Panel")
        if design.variant.follow_up:
            require(r1 & ~obs[:, w2], "W2 must be observed for followed-up R1 cases")
            indicator_rule(r1, "W2", "Y3", "R1")
        r2 = cohort_codes == COHORT_CODES[Cohort.R2]
        require(r2 & ~obs[:, y3], "Y3 must be observed for R2 cases")

    return structural & ~obs


def _cohort_codes(cohort) -> np.ndarray:
    if isinstance(cohort, np.ndarray) and cohort.dtype.kind in "iu":
        return cohort.astype(np.int8)
    return np.array([c if isinstance(c, (int, np.integer)) else COHORT_CODES[Cohort(c)] for c in cohort],
                    dtype=np.int8)


def make_dataset(design: StudyDesign, cohort, x, values, case_ids=None,
                 covariate_names=(), truth=None) -> PanelDataset:
    """Build and validate a dataset from arrays (values in chain order)."""
    values = np.asarray(values, dtype=np.int8).reshape(-1, len(design.chain))
    n = len(values)
    cohort = _cohort_codes(cohort)
    x = np.asarray(x, dtype=float)
    x = x.reshape(n, x.shape[-1] if x.ndim == 2 else -1) if n else x.reshape(0, x.shape[-1] if x.ndim == 2 else 0)
    if not np.isfinite(x).all():
        raise MalformedFile("covariates must be fully observed and finite")
    if case_ids is None:
        case_ids = tuple(f"c{i}" for i in range(n))
    if not np.isin(values, (MISSING, 0, 1)).all():
        raise MalformedFile("outcome/indicator cells must be 0, 1 or missing")
    structural = classify_cells(design, cohort, values, case_ids)
    return PanelDataset(design, tuple(case_ids), cohort, x, values, structural,
                        tuple(covariate_names),
                        None if truth is None else np.asarray(truth, dtype=np.int8))


def _check_covariate_balance(ds: PanelDataset) -> None:
    panel = ds.cohort_mask(Cohort.Panel)
    for cohort in ds.design.cohorts[1:]:
        other = ds.cohort_mask(cohort)
        if panel.sum() < 2 or other.sum() < 2:
            continue
        for j, name in enumerate(ds.covariate_names):
            a, b = ds.x[panel, j], ds.x[other, j]
            se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
            if se > 0 and abs(a.mean() - b.mean()) / se > 4:
                warnings.warn(f"covariate {name} distribution differs between Panel and {cohort.value}",
                              stacklevel=3)


def _parse_cell(token: str, where: str) -> int:
    token = token.strip()
    if token == MISSING_TOKEN:
        return MISSING
    if token in ("0", "1"):
        return int(token)
    raise MalformedFile(f"{where}: expected 0, 1 or '?', got {token!r}")


def read_dataset(text: str, design: StudyDesign) -> PanelDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MalformedFile("empty file") from None
    if header[:2] != ["case_id", "cohort"]:
        raise MalformedFile("header must start with case_id,cohort")
    outcome_cols = [c.lower() for c in design.outcome_columns]
    cov_cols = [h for h in header[2:] if h.startswith("x_")]
    rest = [h for h in header[2:] if not h.startswith("x_")]
    if sorted(rest) != sorted(outcome_cols):
        raise MalformedFile(f"expected outcome columns {outcome_cols} for {design.variant.value}, got {rest}")
    pos = {h: i for i, h in enumerate(header)}
    chain_pos = [pos[v.lower()] for v in design.chain]

    ids, cohorts, xs, vals = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedFile(f"line {lineno}: {len(row)} fields, header has {len(header)}")
        ids.append(row[0].strip())
        try:
            cohorts.append(COHORT_CODES[Cohort(row[1].strip())])
        except ValueError:
            raise MalformedFile(f"line {lineno}: unknown cohort {row[1]!r}") from None
        try:
            xs.append([float(row[pos[c]]) for c in cov_cols])
        except ValueError:
            raise MalformedFile(f"line {lineno}: covariates must be numeric and observed") from None
        vals.append([_parse_cell(row[p], f"line {lineno}") for p in chain_pos])

    if len(set(ids)) != len(ids):
        raise MalformedFile("duplicate case_id")
    n = len(ids)
    ds = make_dataset(design, np.asarray(cohorts, dtype=np.int8),
                      np.asarray(xs, dtype=float).reshape(n, len(cov_cols)),
                      np.asarray(vals, dtype=np.int8).reshape(n, len(design.chain)),
                      tuple(ids), tuple(c[2:] for c in cov_cols))
    _check_covariate_balance(ds)
    return ds


def load_dataset(path: str | os.PathLike, design: StudyDesign) -> PanelDataset:
    """Load and validate a CSV dataset against ``design``."""
    path = Path(path)
    if not path.exists():
        raise MalformedFile(f"no such file: {path}")
    return read_dataset(path.read_text(), design)


def _fmt_x(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_dataset(ds: PanelDataset, values: np.ndarray | None = None) -> str:
    values = ds.values if values is None else values
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    cols = list(ds.design.outcome_columns)
    writer.writerow(["case_id", "cohort", *(f"x_{c}" for c in ds.covariate_names), *(c.lower() for c in cols)])
    idx = [ds.design.index(c) for c in cols]
    for i, cid in enumerate(ds.case_ids):
        cells = [MISSING_TOKEN if values[i, j] == MISSING else str(int(values[i, j])) for j in idx]
        writer.writerow([cid, CODE_COHORTS[int(ds.cohort[i])].value, *(_fmt_x(v) for v in ds.x[i]), *cells])
    return out.getvalue()


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_dataset(ds: PanelDataset, path: str | os.PathLike, values: np.ndarray | None = None) -> None:
    write_text_atomic(path, format_dataset(ds, values))


def counts(ds: PanelDataset) -> dict[str, int]:
    panel = ds.cohort_mask(Cohort.Panel)
    out = {
        "N_P": int(panel.sum()),
        "N_CP": int((panel & (ds.column("W1") == 1)).sum()) if len(ds) else 0,
        "N_CP2": 0,
        "N_R1": int(ds.cohort_mask(Cohort.R1).sum()),
        "N_R2": int(ds.cohort_mask(Cohort.R2).sum()),
    }
    if ds.design.n_waves == 3 and len(ds):
        out["N_CP2"] = int((panel & (ds.column("W2") == 1)).sum())
    return out
