"""Wald tests of linear hypotheses ``L theta* = c`` on a fitted model.

``theta*`` is the parameter vector without the correlation parameters
(regression, power and dispersion parameters, in that order) and ``J*^{-1}``
the matching block of the inverse Godambe matrix.  The statistic

    W = (L theta* - c)' (L J*^{-1} L')^{-1} (L theta* - c)

is referred to a chi-square distribution with ``rows(L)`` degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaincc

from .errors import DomainError, IncompatiblePredictorsError, NonTestableHypothesisError, ShapeError


def chi2_sf(w, df):
    """Upper tail probability of chi-square(df) at ``w``: ``Q(df/2, w/2)``."""
    w = np.asarray(w, dtype=float)
    if np.any(np.asarray(df) < 1) or np.any(np.asarray(df) != np.floor(df)):
        raise DomainError(f"degrees of freedom must be a positive integer, got {df!r}")
    if np.any(w < 0) or np.any(np.isnan(w)):
        raise DomainError(f"chi-square statistic must be nonnegative, got {w!r}")
    p = gammaincc(np.asarray(df, dtype=float) / 2.0, w / 2.0)
    return float(p) if p.ndim == 0 else p


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """Constraint matrix ``L`` (s x h) and null values ``c`` over ``theta*``.

    ``scope`` lists the full-theta indices selecting ``theta*``; ``None``
    means every non-correlation parameter of the fit, in theta order.
    """

    L: np.ndarray
    c: np.ndarray = None
    scope: tuple | None = None
    labels: tuple = field(default=())

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        c = np.zeros(L.shape[0]) if self.c is None else np.atleast_1d(np.asarray(self.c, dtype=float))
        if c.shape != (L.shape[0],):
            raise ShapeError(f"c has {c.size} entries but L has {L.shape[0]} rows")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "c", c)
        if self.scope is not None:
            object.__setattr__(self, "scope", tuple(int(i) for i in self.scope))
        _check_rank(L)

    @property
    def n_constraints(self) -> int:
        return self.L.shape[0]


@dataclass(frozen=True, eq=False)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    hypothesis: Hypothesis


def _check_rank(L):
    if not np.all(np.isfinite(L)):
        raise ShapeError("L has non-finite entries")
    if L.shape[0] > L.shape[1]:
        raise NonTestableHypothesisError(f"L has {L.shape[0]} rows but only {L.shape[1]} columns")
    _, R, _ = sla.qr(L.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = 1e-10 * np.linalg.norm(L, 2)
    rank = int(np.sum(diag > tol))
    if rank < L.shape[0]:
        raise NonTestableHypothesisError(f"L has rank {rank} < {L.shape[0]} rows (redundant constraints)")


def _resolve_scope(fit, hyp):
    pmap = fit.parameter_map
    if hyp.scope is None:
        return pmap.scope
    scope = np.asarray(hyp.scope, dtype=int)
    if np.any(scope < 0) or np.any(scope >= len(pmap)):
        raise IndexError("hypothesis scope index out of range")
    rho = set(pmap.indices("rho").tolist())
    if rho.intersection(scope.tolist()):
        raise ShapeError("hypothesis scope may not include correlation parameters")
    return scope


def wald_test(fit, hyp: Hypothesis) -> WaldResult:
    """Generalized Wald test of ``hyp`` on ``fit``."""
    scope = _resolve_scope(fit, hyp)
    L, c = hyp.L, hyp.c
    if L.shape[1] != scope.size:
        raise ShapeError(f"L has {L.shape[1]} columns but theta* has {scope.size} entries")
    theta = fit.theta[scope]
    J = fit.vcov[np.ix_(scope, scope)]
    diff = L @ theta - c
    M = L @ J @ L.T
    try:
        fac = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        raise NonTestableHypothesisError("L J*^{-1} L' is not positive definite") from None
    W = float(diff @ sla.cho_solve(fac, diff))
    W = max(W, 0.0)
    s = L.shape[0]
    return WaldResult(W, s, chi2_sf(W, s), hyp)


# ---------------------------------------------------------------------------
# hypothesis builders
# ---------------------------------------------------------------------------


def _scope_size(scope) -> int:
    return int(scope) if np.isscalar(scope) else len(scope)


def _check_index(h, i):
    if not 0 <= int(i) < h:
        raise IndexError(f"parameter index {i} outside a scope of {h} parameters")


def build_L_single(scope, index, c=0.0) -> Hypothesis:
    """One-row hypothesis ``theta*_index = c``.

    ``scope`` is either the size of ``theta*`` or the list of full-theta
    indices defining it.
    """
    h = _scope_size(scope)
    _check_index(h, index)
    L = np.zeros((1, h))
    L[0, index] = 1.0
    return Hypothesis(L, [c], None if np.isscalar(scope) else tuple(scope))


def build_L_subset(scope, indices, c=None) -> Hypothesis:
    """Joint hypothesis ``theta*_i = c_i`` for every listed index."""
    h = _scope_size(scope)
    indices = list(indices)
    if not indices:
        raise ShapeError("need at least one index")
    L = np.zeros((len(indices), h))
    for row, i in enumerate(indices):
        _check_index(h, i)
        L[row, i] = 1.0
    return Hypothesis(L, c, None if np.isscalar(scope) else tuple(scope))


def build_L_equality(scope, i, j) -> Hypothesis:
    """``theta*_i - theta*_j = 0``."""
    h = _scope_size(scope)
    _check_index(h, i)
    _check_index(h, j)
    if i == j:
        raise ShapeError("equality hypothesis needs two distinct parameters")
    L = np.zeros((1, h))
    L[0, i] = 1.0
    L[0, j] = -1.0
    return Hypothesis(L, [0.0], None if np.isscalar(scope) else tuple(scope))


def build_L_kronecker(G, F) -> np.ndarray:
    """``L = G kron F`` with G over responses and F over one response's parameters."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if G.shape[0] != G.shape[1]:
        raise ShapeError("G must be square (responses x responses)")
    return np.kron(G, F)


def shared_block_size(fit, kind: str) -> int:
    """Per-response parameter count of ``kind``; raises if responses differ."""
    model = fit.model
    if kind == "beta":
        sizes = {s.n_coef for s in model.responses}
        names = {s.column_names for s in model.responses}
        if len(sizes) != 1 or len(names) != 1:
            raise IncompatiblePredictorsError("responses do not share the same linear predictor")
    elif kind == "tau":
        sizes = {mp.n_components for mp in model.predictors}
        if len(sizes) != 1:
            raise IncompatiblePredictorsError("responses do not share the same matrix predictor size")
    else:
        raise ValueError(f"unsupported parameter block {kind!r}")
    return sizes.pop()


def embed_columns(fit, kind: str, block: np.ndarray, response: int | None = None) -> np.ndarray:
    """Place constraint columns over the ``kind`` parameters into theta* columns.

    With ``response=None`` the block spans that kind for all responses in
    theta order (as produced by :func:`build_L_kronecker`); otherwise it
    spans one response's parameters of that kind.
    """
    pmap = fit.parameter_map
    scope = pmap.scope
    target = pmap.indices(kind, response)
    block = np.atleast_2d(np.asarray(block, dtype=float))
    if block.shape[1] != target.size:
        raise ShapeError(f"constraint block has {block.shape[1]} columns, expected {target.size}")
    pos = np.searchsorted(scope, target)
    L = np.zeros((block.shape[0], scope.size))
    L[:, pos] = block
    return L


def kronecker_hypothesis(fit, F, kind: str = "beta", G=None, c=None) -> Hypothesis:
    """Hypothesis ``(G kron F) theta_kind = c`` embedded in theta*."""
    h_per = shared_block_size(fit, kind)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape[1] != h_per:
        raise ShapeError(f"F has {F.shape[1]} columns, each response has {h_per} {kind} parameters")
    R = fit.model.n_responses
    G = np.eye(R) if G is None else G
    L = embed_columns(fit, kind, build_L_kronecker(G, F))
    return Hypothesis(L, c)
