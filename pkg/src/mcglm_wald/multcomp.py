"""Multiple comparisons of factor levels through Wald tests.

``K0`` maps the regression parameters of one response to the fitted linear
predictor of every cell of one or more factors; ``K1`` holds all pairwise
differences of ``K0`` rows.  Each selected row of ``K1`` becomes one Wald test
(per response, or jointly across responses through ``I_R kron row``), with
Bonferroni-adjusted p-values.
"""

from __future__ import annotations

import fnmatch
import itertools
from dataclasses import dataclass

import numpy as np

from .anova import _response_index, _shared_terms
from .design import Design
from .errors import SelectionError, TermError
from .tables import TestRow, TestTable
from .wald import Hypothesis, embed_columns, kronecker_hypothesis, wald_test


@dataclass(frozen=True, eq=False)
class CombinationMatrix:
    K0: np.ndarray
    labels: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class ContrastMatrix:
    K1: np.ndarray
    labels: tuple[str, ...]


def _design_of(source, response=0) -> Design:
    if isinstance(source, Design):
        return source
    spec = source.model.responses[_response_index(source, response)]
    if spec.design is None:
        raise TermError(f"response {spec.name!r} carries no design metadata (build it with build_design)")
    return spec.design


def build_k0(source, effect, response=0, others: str = "average") -> CombinationMatrix:
    """Linear combinations giving the linear predictor of every cell of ``effect``.

    ``effect`` is a factor name or a list of factor names; cells enumerate the
    Cartesian product of their levels in declaration order.  Variables not in
    ``effect`` are averaged over their levels (``others="average"``; numeric
    covariates at their mean) or held at the reference level
    (``others="reference"``).
    """
    design = _design_of(source, response)
    effect = [effect] if isinstance(effect, str) else list(effect)
    if not effect:
        raise TermError("need at least one factor")
    for v in effect:
        if v not in design.factors:
            kind = "numeric" if v in design.numeric_means else "unknown"
            raise TermError(f"{v!r} is not a categorical term of the model ({kind})")
    if others not in ("average", "reference"):
        raise ValueError("others must be 'average' or 'reference'")
    rest = {}
    for v in list(design.factors) + list(design.numeric_means):
        if v in effect:
            continue
        if others == "average":
            rest[v] = design.average_encoding(v)
        elif v in design.factors:
            rest[v] = design.factors[v][0]
        else:
            rest[v] = design.numeric_means[v]
    rows, labels = [], []
    for cell in itertools.product(*(design.factors[v] for v in effect)):
        values = dict(rest)
        values.update(zip(effect, cell))
        rows.append(design.encode(values))
        labels.append(":".join(cell))
    return CombinationMatrix(np.array(rows), tuple(labels))


def build_k1(k0: CombinationMatrix) -> ContrastMatrix:
    """All pairwise differences ``row_i - row_j`` (i < j) of ``K0``."""
    q = k0.K0.shape[0]
    if q < 2:
        raise SelectionError("need at least two cells to form contrasts")
    rows, labels = [], []
    for i, j in itertools.combinations(range(q), 2):
        rows.append(k0.K0[i] - k0.K0[j])
        labels.append(f"{k0.labels[i]}-{k0.labels[j]}")
    return ContrastMatrix(np.array(rows), tuple(labels))


def select_contrasts(contrasts: ContrastMatrix, select=None) -> list[int]:
    """Row indices whose labels match any of the given names or glob patterns."""
    if select is None:
        return list(range(len(contrasts.labels)))
    if isinstance(select, str):
        select = [select]
    chosen = []
    for k, label in enumerate(contrasts.labels):
        if any(label == pat or fnmatch.fnmatchcase(label, pat) for pat in select):
            chosen.append(k)
    if not chosen:
        raise SelectionError(f"no contrast matches {list(select)}; available: {list(contrasts.labels)}")
    return chosen


def bonferroni(p, m):
    return min(1.0, m * p)


def pairwise_tests(fit, contrasts: ContrastMatrix, select=None, scope="joint") -> TestTable:
    """Wald test of every selected contrast with Bonferroni adjustment.

    ``scope`` is ``"joint"`` (all responses via the Kronecker expansion) or a
    response name/index.
    """
    chosen = select_contrasts(contrasts, select)
    m = len(chosen)
    if scope == "joint":
        _shared_terms(fit)
        kind = "Multiple comparisons (joint)"
    else:
        r = _response_index(fit, scope)
        kind = f"Multiple comparisons {fit.model.responses[r].name}"
    rows, hyps = [], []
    for k in chosen:
        row = contrasts.K1[k][None, :]
        if scope == "joint":
            hyp = kronecker_hypothesis(fit, row, kind="beta")
        else:
            hyp = Hypothesis(embed_columns(fit, "beta", row, response=r))
        res = wald_test(fit, hyp)
        rows.append(TestRow(contrasts.labels[k], res.df, res.statistic, res.p_value,
                            bonferroni(res.p_value, m)))
        hyps.append(hyp)
    return TestTable(tuple(rows), kind, "", tuple(hyps))
