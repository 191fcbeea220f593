"""Chained conditional logistic models and their identification rules.

A model chain factors the joint law of (Y1, Y2, W1[, Y3, W2]) given the
covariates into one logistic regression per chain variable. Which terms
may be estimated depends on the study design: refreshment samples pin down
a fixed number of functionals of the joint table, and any model richer
than that budget (or using a term the data never inform) is rejected.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .data import THREE_WAVE_CHAIN, StudyDesign, Variant
from .errors import NotIdentified

CHAIN_VARS = THREE_WAVE_CHAIN
_CHAIN_POS = {v: i for i, v in enumerate(CHAIN_VARS)}


def _factor_key(name: str):
    return (_CHAIN_POS.get(name, -1), name)


@dataclass(frozen=True, order=True)
class Term:
    """Product of named factors; the empty product is the intercept."""

    factors: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.factors) > 2:
            raise ValueError("only pairwise interactions are supported")
        if len(set(self.factors)) != len(self.factors):
            raise ValueError(f"interaction operands must be distinct: {self.factors}")
        object.__setattr__(self, "factors", tuple(sorted(self.factors, key=_factor_key)))

    @classmethod
    def parse(cls, text: str) -> "Term":
        text = text.strip()
        if text in ("1", "Intercept", "(Intercept)"):
            return cls(())
        parts = tuple(p.strip() for p in text.split(":"))
        if not all(parts) or "1" in parts:
            raise ValueError(f"bad term {text!r}")
        return cls(parts)

    @property
    def kind(self) -> str:
        if not self.factors:
            return "intercept"
        if len(self.factors) == 2:
            return "interaction"
        name = self.factors[0]
        if name.startswith("Y") and name in _CHAIN_POS:
            return "outcome"
        if name.startswith("W") and name in _CHAIN_POS:
            return "indicator"
        return "covariate"

    @property
    def chain_vars(self) -> frozenset[str]:
        return frozenset(f for f in self.factors if f in _CHAIN_POS)

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(f for f in self.factors if f not in _CHAIN_POS)

    @property
    def involves_covariate(self) -> bool:
        return bool(self.covariates)

    @property
    def label(self) -> str:
        return ":".join(self.factors) if self.factors else "1"

    def __str__(self):
        return self.label


INTERCEPT = Term(())


@dataclass(frozen=True)
class ConditionalModel:
    response: str
    terms: tuple[Term, ...]
    fixed: Mapping[Term, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "fixed", dict(self.fixed))
        if self.response not in _CHAIN_POS:
            raise ValueError(f"unknown response {self.response!r}")
        seen = set()
        pos = _CHAIN_POS[self.response]
        for t in (*self.terms, *self.fixed):
            if t in seen:
                raise ValueError(f"{self.response}: term {t} listed twice")
            seen.add(t)
            for v in t.chain_vars:
                if _CHAIN_POS[v] >= pos:
                    raise ValueError(f"{self.response} model cannot depend on {v} (later in the chain)")

    def names(self) -> list[str]:
        return [f"{self.response}~{t.label}" for t in self.terms]

    def with_fixed(self, term: Term, value: float) -> "ConditionalModel":
        terms = tuple(t for t in self.terms if t != term)
        fixed = {k: v for k, v in self.fixed.items() if k != term}
        fixed[term] = float(value)
        return ConditionalModel(self.response, terms, fixed)

    def to_text(self) -> str:
        parts = [t.label for t in self.terms]
        parts += [f"fix({t.label}={v!r})" for t, v in self.fixed.items()]
        return f"{self.response} ~ {' + '.join(parts) if parts else '0'}"


@dataclass(frozen=True)
class ModelSpec:
    design: StudyDesign
    chain: tuple[ConditionalModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "chain", tuple(self.chain))
        got = tuple(m.response for m in self.chain)
        if got != self.design.chain:
            raise ValueError(f"chain responses {got} do not match design chain {self.design.chain}")

    def __getitem__(self, response: str) -> ConditionalModel:
        for m in self.chain:
            if m.response == response:
                return m
        raise KeyError(response)

    def param_names(self) -> list[str]:
        return [n for m in self.chain for n in m.names()]

    def covariates(self) -> tuple[str, ...]:
        out = []
        for m in self.chain:
            for t in (*m.terms, *m.fixed):
                for c in t.covariates:
                    if c not in out:
                        out.append(c)
        return tuple(out)

    def replace(self, model: ConditionalModel) -> "ModelSpec":
        return ModelSpec(self.design, tuple(model if m.response == model.response else m for m in self.chain))

    def with_fixed(self, response: str, term: Term, value: float) -> "ModelSpec":
        return self.replace(self[response].with_fixed(term, value))

    def to_text(self) -> str:
        return "\n".join(m.to_text() for m in self.chain) + "\n"


def cell_count(design: StudyDesign) -> int:
    """Cells of the full binary table over the chain variables."""
    return 2 ** len(design.chain)


_BUDGET = {
    Variant.TwoWave: 7,
    Variant.ThreeMonotoneNoFollow: 16,
    Variant.ThreeReturnersNoFollow: 20,
    Variant.ThreeMonotoneFollow: 20,
    Variant.ThreeReturnersFollow: 22,
}


def independent_constraints(design: StudyDesign) -> int:
    """Number of joint-table functionals the observed data identify."""
    return _BUDGET[design.variant]


def forbidden_reason(design: StudyDesign, response: str, term: Term) -> str | None:
    """Why ``term`` may not be freely estimated in ``response``'s model, or None."""
    if term.involves_covariate:
        return None
    vs = term.chain_vars
    if response == "W1" and {"Y1", "Y2"} <= vs:
        return "separability: no Y1*Y2 interaction in the W1 selection model"
    if response not in ("Y3", "W2"):
        return None
    if "Y3" in vs and len(vs) > 1:
        return "interactions involving Y3 are not identified"
    if "W1" not in vs:
        return None
    variant = design.variant
    if variant is Variant.ThreeMonotoneNoFollow:
        return "W1=0 is never observed with Y3 or W2, so wave-3 models cannot depend on W1"
    if vs == {"W1"}:
        return None
    if vs == {"Y1", "W1"} and variant.returners:
        return None
    if vs == {"Y2", "W1"} and variant.follow_up:
        return None
    if vs == {"Y2", "W1"}:
        return "Y2*W1 is not identified: Y2 is seen with wave-3 data only when W1=1"
    return f"{term.label} is not identified under {variant.value}"


@dataclass
class ValidationReport:
    passed: bool
    free_parameters: int
    budget: int
    violations: list[tuple[str, str, str]]

    def __str__(self):
        head = (f"{'PASS' if self.passed else 'NotIdentified'}: {self.free_parameters} free "
                f"non-covariate parameters (incl. sum-to-one) vs budget {self.budget}")
        lines = [head] + [f"  {resp} ~ {term}: {why}" for resp, term, why in self.violations]
        return "\n".join(lines)


def check_identified(spec: ModelSpec) -> ValidationReport:
    """Identification report without raising."""
    n_free = 1
    violations = []
    for m in spec.chain:
        for t in m.terms:
            if not t.involves_covariate:
                n_free += 1
            why = forbidden_reason(spec.design, m.response, t)
            if why:
                violations.append((m.response, t.label, why))
    budget = independent_constraints(spec.design)
    if n_free > budget:
        violations.append(("*", "*", f"{n_free} free parameters exceed the {budget} identified quantities"))
    return ValidationReport(not violations, n_free, budget, violations)


def validate_identified(spec: ModelSpec) -> ValidationReport:
    """Return the PASS report, or raise NotIdentified listing offending terms."""
    report = check_identified(spec)
    if not report.passed:
        raise NotIdentified(str(report), report.violations)
    return report


def _extra_wave3_terms(variant: Variant) -> list[Term]:
    if variant is Variant.ThreeReturnersNoFollow:
        return [Term(("W1",)), Term(("Y1", "W1"))]
    if variant is Variant.ThreeReturnersFollow:
        return [Term(("W1",)), Term(("Y1", "W1")), Term(("Y2", "W1"))]
    if variant is Variant.ThreeMonotoneFollow:
        return [Term(("W1",)), Term(("Y2", "W1"))]
    return []


def default_an_spec(design: StudyDesign, covariates: Sequence[str] = ()) -> ModelSpec:
    """Just-identified additive nonignorable chain for ``design``."""
    cov = [Term((c,)) for c in covariates]
    y1, y2, y3 = Term(("Y1",)), Term(("Y2",)), Term(("Y3",))
    y1y2 = Term(("Y1", "Y2"))
    chain = [
        ConditionalModel("Y1", (INTERCEPT, *cov)),
        ConditionalModel("Y2", (INTERCEPT, *cov, y1)),
        ConditionalModel("W1", (INTERCEPT, *cov, y1, y2)),
    ]
    if design.n_waves == 3:
        extra = _extra_wave3_terms(design.variant)
        main_w1 = [t for t in extra if t.kind == "indicator"]
        inter_w1 = [t for t in extra if t.kind == "interaction"]
        chain.append(ConditionalModel("Y3", (INTERCEPT, *cov, y1, y2, *main_w1, y1y2, *inter_w1)))
        chain.append(ConditionalModel("W2", (INTERCEPT, *cov, y1, y2, y3, *main_w1, y1y2, *inter_w1)))
    return ModelSpec(design, tuple(chain))


_FIX_RE = re.compile(r"fix\(\s*([^=()]+?)\s*=\s*([^()]+?)\s*\)")


def parse_model_line(line: str) -> ConditionalModel:
    if "~" not in line:
        raise ValueError(f"model line lacks '~': {line!r}")
    lhs, rhs = (s.strip() for s in line.split("~", 1))
    fixed = {}
    for term_text, value in _FIX_RE.findall(rhs):
        fixed[Term.parse(term_text)] = float(value)
    rhs = _FIX_RE.sub("", rhs)
    terms = []
    for tok in rhs.split("+"):
        tok = tok.strip()
        if not tok or tok == "0":
            continue
        terms.append(Term.parse(tok))
    return ConditionalModel(lhs, tuple(terms), fixed)


def parse_spec(text: str, design: StudyDesign) -> ModelSpec:
    """Parse ``response ~ term + term + fix(term=value)`` lines."""
    models = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = parse_model_line(line)
        models[m.response] = m
    missing = [r for r in design.chain if r not in models]
    if missing:
        raise ValueError(f"spec lacks models for {missing}")
    extra = [r for r in models if r not in design.chain]
    if extra:
        raise ValueError(f"spec has models not in the design chain: {extra}")
    return ModelSpec(design, tuple(models[r] for r in design.chain))


def parse_term_at(text: str) -> tuple[str, Term]:
    """``"Y1:Y2@W1"`` -> ("W1", Term(Y1:Y2))."""
    if "@" not in text:
        raise ValueError(f"expected TERM@RESPONSE, got {text!r}")
    term, response = text.rsplit("@", 1)
    return response.strip(), Term.parse(term)


def restrict(spec: ModelSpec, response: str, drop: Iterable[str]) -> ModelSpec:
    """Drop named terms from one model (e.g. the MAR and HW special cases)."""
    drop = {Term.parse(d) for d in drop}
    m = spec[response]
    return spec.replace(ConditionalModel(m.response, tuple(t for t in m.terms if t not in drop), m.fixed))
