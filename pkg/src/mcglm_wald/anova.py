"""ANOVA and MANOVA tables built from sequences of Wald tests.

Type I tests the terms sequentially: row k states that every parameter from
term k onward is zero.  Type II tests a term together with every term that
contains it.  Type III tests exactly the parameters of one term.  No model is
refitted; every row is a Wald test against the full-model covariance.
"""

from __future__ import annotations

import numpy as np

from .design import TermMap
from .errors import IncompatiblePredictorsError, TermError
from .tables import TestRow, TestTable
from .wald import Hypothesis, embed_columns, kronecker_hypothesis, shared_block_size, wald_test

TYPES = ("I", "II", "III")


def _normalize_type(type_) -> str:
    t = {"1": "I", "2": "II", "3": "III"}.get(str(type_), str(type_).upper())
    if t not in TYPES:
        raise ValueError(f"ANOVA type must be one of I, II, III (or 1, 2, 3), got {type_!r}")
    return t


def term_map(spec) -> TermMap:
    """Term structure of a response (one term per column without design metadata)."""
    design = spec.design
    if design is not None:
        return design.terms
    return TermMap.from_columns(spec.column_names)


def term_columns(terms: TermMap, type_: str):
    """(label, beta columns) pairs defining each table row."""
    type_ = _normalize_type(type_)
    items = list(terms)
    rows = []
    for k, term in enumerate(items):
        if type_ == "I":
            cols = [c for t in items[k:] for c in t.columns]
        elif type_ == "II":
            cols = list(term.columns) + [c for t in terms.containing(term) for c in t.columns]
        else:
            cols = list(term.columns)
        rows.append((term.name, sorted(cols)))
    return rows


def _response_index(fit, response) -> int:
    if isinstance(response, str):
        names = [s.name for s in fit.model.responses]
        if response not in names:
            raise TermError(f"unknown response {response!r}; available: {names}")
        return names.index(response)
    r = int(response)
    if not 0 <= r < fit.model.n_responses:
        raise IndexError(f"response index {r} out of range")
    return r


def _selector(n, cols):
    F = np.zeros((len(cols), n))
    F[np.arange(len(cols)), cols] = 1.0
    return F


def anova_table(fit, response=0, type="II") -> TestTable:
    """Per-response ANOVA table for the regression parameters."""
    type_ = _normalize_type(type)
    r = _response_index(fit, response)
    spec = fit.model.responses[r]
    rows, hyps = [], []
    for label, cols in term_columns(term_map(spec), type_):
        L = embed_columns(fit, "beta", _selector(spec.n_coef, cols), response=r)
        hyp = Hypothesis(L)
        res = wald_test(fit, hyp)
        rows.append(TestRow(label, res.df, res.statistic, res.p_value))
        hyps.append(hyp)
    return TestTable(tuple(rows), f"ANOVA {spec.name}", type_, tuple(hyps))


def _shared_terms(fit) -> TermMap:
    shared_block_size(fit, "beta")
    maps = [term_map(s) for s in fit.model.responses]
    first = [(t.name, t.columns) for t in maps[0]]
    for m in maps[1:]:
        if [(t.name, t.columns) for t in m] != first:
            raise IncompatiblePredictorsError("responses do not share the same term structure")
    return maps[0]


def manova_table(fit, type="II") -> TestTable:
    """Joint table over all responses, each row using ``I_R kron F``."""
    type_ = _normalize_type(type)
    terms = _shared_terms(fit)
    k = fit.model.responses[0].n_coef
    rows, hyps = [], []
    for label, cols in term_columns(terms, type_):
        hyp = kronecker_hypothesis(fit, _selector(k, cols), kind="beta")
        res = wald_test(fit, hyp)
        rows.append(TestRow(label, res.df, res.statistic, res.p_value))
        hyps.append(hyp)
    return TestTable(tuple(rows), "MANOVA", type_, tuple(hyps))


def dispersion_anova(fit, type="III", scope="joint") -> TestTable:
    """Type III table for the dispersion parameters (each tested against zero).

    ``scope`` is ``"joint"`` (one row per dispersion component across all
    responses) or a response name/index.
    """
    type_ = _normalize_type(type)
    if type_ != "III":
        raise ValueError("dispersion tables are only defined for type III")
    rows, hyps = [], []
    if scope == "joint":
        D = shared_block_size(fit, "tau")
        for d in range(D):
            hyp = kronecker_hypothesis(fit, _selector(D, [d]), kind="tau")
            res = wald_test(fit, hyp)
            rows.append(TestRow(f"tau{d}", res.df, res.statistic, res.p_value))
            hyps.append(hyp)
        kind = "Dispersion MANOVA"
    else:
        r = _response_index(fit, scope)
        D = fit.model.predictors[r].n_components
        for d in range(D):
            L = embed_columns(fit, "tau", _selector(D, [d]), response=r)
            hyp = Hypothesis(L)
            res = wald_test(fit, hyp)
            rows.append(TestRow(f"tau{d}", res.df, res.statistic, res.p_value))
            hyps.append(hyp)
        kind = f"Dispersion ANOVA {fit.model.responses[r].name}"
    return TestTable(tuple(rows), kind, type_, tuple(hyps))
