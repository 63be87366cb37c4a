"""Design matrices from tabular data, with the term bookkeeping ANOVA needs.

Factors use treatment contrasts (first level is the reference).  A formula is
a ``+``-separated list of terms; ``a*b`` expands to ``a + b + a:b`` and
``a:b`` is the interaction alone.  Only main effects and pairwise
interactions are supported.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, TermError


@dataclass(frozen=True)
class Term:
    name: str
    variables: tuple[str, ...]
    columns: tuple[int, ...]

    @property
    def is_intercept(self) -> bool:
        return not self.variables


class TermMap:
    """Terms of one linear predictor and the beta columns each owns."""

    def __init__(self, terms):
        self.terms = tuple(terms)
        owned = sorted(c for t in self.terms for c in t.columns)
        if owned != list(range(len(owned))):
            raise ConfigError("every design column must belong to exactly one term")

    def __iter__(self):
        return iter(self.terms)

    def __len__(self):
        return len(self.terms)

    @property
    def names(self):
        return [t.name for t in self.terms]

    def term(self, name: str) -> Term:
        for t in self.terms:
            if t.name == name:
                return t
        raise TermError(f"unknown term {name!r}; available: {self.names}")

    @staticmethod
    def contains(outer: Term, inner: Term) -> bool:
        """True when ``outer`` is a higher-order term containing ``inner``."""
        return bool(inner.variables) and set(inner.variables) < set(outer.variables)

    def containing(self, term: Term):
        return [t for t in self.terms if self.contains(t, term)]

    @classmethod
    def from_columns(cls, column_names) -> "TermMap":
        """One term per column; no containment."""
        terms = []
        for j, name in enumerate(column_names):
            variables = () if name == "Intercept" else (name,)
            terms.append(Term(name, variables, (j,)))
        return cls(terms)


def parse_formula(formula) -> list[tuple[str, ...]]:
    """Terms of a formula as variable tuples, in declaration order."""
    if isinstance(formula, str):
        pieces = [p.strip() for p in formula.split("+")]
    else:
        pieces = [str(p).strip() for p in formula]
    out = []
    for piece in pieces:
        if not piece or piece == "1":
            continue
        if "*" in piece:
            a, _, b = (s.strip() for s in piece.partition("*"))
            if not a or not b or "*" in b or ":" in a or ":" in b:
                raise ConfigError(f"cannot parse term {piece!r}")
            expanded = [(a,), (b,), (a, b)]
        elif ":" in piece:
            parts = tuple(s.strip() for s in piece.split(":"))
            if len(parts) != 2 or not all(parts):
                raise ConfigError(f"only pairwise interactions are supported: {piece!r}")
            expanded = [parts]
        else:
            expanded = [(piece,)]
        for t in expanded:
            if len(set(t)) != len(t):
                raise ConfigError(f"term {piece!r} repeats a variable")
            if not any(set(t) == set(o) for o in out):
                out.append(t)
    return out


@dataclass(frozen=True, eq=False)
class Design:
    """A design matrix plus what is needed to rebuild rows of it."""

    X: np.ndarray
    column_names: tuple[str, ...]
    terms: TermMap
    factors: dict  # variable -> tuple of levels (first is reference)
    numeric_means: dict  # numeric variable -> mean in the data

    def encode(self, values: dict) -> np.ndarray:
        """Design row for a mapping variable -> value (or per-variable encoding vector)."""
        row = []
        for term in self.terms:
            enc = [self._encoding(v, values[v]) for v in term.variables]
            vec = np.ones(1)
            for e in enc:
                vec = np.outer(vec, e).ravel()
            row.extend(vec.tolist())
        return np.asarray(row)

    def _encoding(self, var, value):
        if isinstance(value, np.ndarray):
            return value
        if var in self.factors:
            levels = self.factors[var]
            value = str(value)
            if value not in levels:
                raise TermError(f"level {value!r} not among the levels of {var!r}: {levels}")
            e = np.zeros(len(levels) - 1)
            k = levels.index(value)
            if k:
                e[k - 1] = 1.0
            return e
        return np.array([float(value)])

    def average_encoding(self, var):
        if var in self.factors:
            n = len(self.factors[var])
            return np.full(n - 1, 1.0 / n)
        return np.array([self.numeric_means[var]])


def _column_label(var, level):
    return f"{var}[{level}]"


def build_design(data: pd.DataFrame, formula, factors: dict | None = None,
                 intercept: bool = True) -> Design:
    """Treatment-contrast design matrix for ``formula`` over ``data``.

    ``factors`` optionally fixes the level order of categorical variables;
    non-numeric columns are treated as factors with sorted levels.
    """
    factors = dict(factors or {})
    term_vars = parse_formula(formula)
    variables = []
    for t in term_vars:
        for v in t:
            if v not in variables:
                variables.append(v)
    levels = {}
    means = {}
    for v in variables:
        if v not in data.columns:
            raise ConfigError(f"unknown column {v!r}")
        col = data[v]
        if v in factors or not pd.api.types.is_numeric_dtype(col):
            given = factors.get(v)
            observed = sorted(set(col.astype(str)))
            lv = tuple(str(x) for x in given) if given is not None else tuple(observed)
            missing = set(observed) - set(lv)
            if missing:
                raise ConfigError(f"column {v!r} has levels {sorted(missing)} not declared in its level list")
            if len(lv) < 2:
                raise ConfigError(f"factor {v!r} needs at least two levels")
            levels[v] = lv
        else:
            means[v] = float(col.mean())

    names, blocks, terms = [], [], []
    col = 0
    if intercept:
        names.append("Intercept")
        blocks.append(np.ones((len(data), 1)))
        terms.append(Term("Intercept", (), (0,)))
        col = 1
    for t in term_vars:
        encs, labels = [], []
        for v in t:
            if v in levels:
                lv = levels[v]
                vals = data[v].astype(str).to_numpy()
                encs.append(np.column_stack([(vals == x).astype(float) for x in lv[1:]]))
                labels.append([_column_label(v, x) for x in lv[1:]])
            else:
                encs.append(data[v].to_numpy(dtype=float)[:, None])
                labels.append([v])
        block = encs[0]
        lab = labels[0]
        for e, l in zip(encs[1:], labels[1:]):
            block = (block[:, :, None] * e[:, None, :]).reshape(len(data), -1)
            lab = [f"{a}:{b}" for a, b in itertools.product(lab, l)]
        cols = tuple(range(col, col + block.shape[1]))
        terms.append(Term(":".join(t), t, cols))
        names.extend(lab)
        blocks.append(block)
        col += block.shape[1]
    if not blocks:
        raise ConfigError("empty linear predictor")
    X = np.hstack(blocks)
    return Design(X, tuple(names), TermMap(terms), levels, means)
