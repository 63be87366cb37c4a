"""Estimating-function fit of multivariate covariance GLMs.

Regression parameters solve the quasi-score equation

    psi_beta = D' C^{-1} (y - mu) = 0,

dispersion-type parameters (correlations, powers, dispersions) solve the
Pearson equations

    psi_lambda_i = tr(W_i (r r' - C)) = 0,  W_i = C^{-1} (dC/dlambda_i) C^{-1},

and both are iterated with the modified chaser algorithm.  The asymptotic
covariance of the estimates is the inverse Godambe information
``S^{-1} V S^{-T}``.

Internally the joint covariance is split into independent clusters (the
connected components of the union of the ``Z`` sparsity patterns), so
independent or block-structured data never touch an ``NR x NR`` dense matrix.
The module-level functions ``quasi_score``, ``pearson_function``,
``sensitivity_beta`` and friends work on full dense matrices and are meant for
inspection and cross-checks.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (
    ConfigError,
    DomainError,
    InvalidDispersionError,
    NotPositiveDefiniteError,
    NumericalError,
    ShapeError,
    SingularInformationError,
    SingularSensitivityError,
)
from .model_core import (
    McglmModel,
    cholesky,
    correlation_matrix,
    dchol,
    joint_from_factors,
    sigma_from_blocks,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    """Controls for the chaser iterations."""

    tol: float = 1e-6
    max_iter: int = 100
    alpha: float = 1.0
    max_halving: int = 10
    verbose: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.max_halving < 0:
            raise ConfigError("max_halving must be nonnegative")


@dataclass(frozen=True, eq=False)
class GodambeMatrices:
    sensitivity: np.ndarray
    variability: np.ndarray
    inverse: np.ndarray


# ---------------------------------------------------------------------------
# cluster layout
# ---------------------------------------------------------------------------


class _Group:
    """All clusters of one size ``m``: indices (G, m) and Z blocks per response."""

    def __init__(self, idx, zblocks):
        self.idx = idx
        self.zblocks = zblocks  # zblocks[r][d] -> (G, m, m)

    @property
    def size(self):
        return self.idx.shape[1]


class ClusterLayout:
    """Partition of the observations into independent covariance clusters."""

    def __init__(self, model: McglmModel, dense: bool = False):
        N = model.n_obs
        if dense:
            labels = np.zeros(N, dtype=int)
        else:
            pattern = sp.identity(N, format="csr")
            seen = set()
            for mp in model.predictors:
                for z in mp.components:
                    if id(z) not in seen:
                        seen.add(id(z))
                        pattern = pattern + abs(z)
            _, labels = connected_components(pattern, directed=False)
        order = np.argsort(labels, kind="stable")
        sizes = np.bincount(labels)
        starts = np.concatenate([[0], np.cumsum(sizes)])
        members = [order[starts[c]:starts[c + 1]] for c in range(sizes.size)]
        pos = np.empty(N, dtype=int)
        for mem in members:
            pos[mem] = np.arange(mem.size)

        self.groups = []
        for m in np.unique(sizes):
            comps = np.flatnonzero(sizes == m)
            idx = np.stack([members[c] for c in comps])
            slot = np.full(sizes.size, -1)
            slot[comps] = np.arange(comps.size)
            cache = {}
            zblocks = []
            for mp in model.predictors:
                blocks = []
                for z in mp.components:
                    if id(z) not in cache:
                        coo = z.tocoo()
                        s = slot[labels[coo.row]]
                        keep = s >= 0
                        blk = np.zeros((comps.size, m, m))
                        blk[s[keep], pos[coo.row[keep]], pos[coo.col[keep]]] = coo.data[keep]
                        cache[id(z)] = blk
                    blocks.append(cache[id(z)])
                zblocks.append(blocks)
            self.groups.append(_Group(idx, zblocks))
        self.n_clusters = sizes.size


# ---------------------------------------------------------------------------
# evaluation of the estimating functions at one parameter point
# ---------------------------------------------------------------------------


def _mu_dependent(spec, p) -> bool:
    v = spec.variance
    if v.is_count or v.kind == "binomial":
        return True
    return bool(np.any(np.asarray(p) != 0))


class _Evaluation:
    """Estimating functions and their matrices at a fixed (beta, lambda).

    The covariance factorization happens in the constructor (raising
    NotPositiveDefiniteError when infeasible); everything else is lazy.
    """

    def __init__(self, model, layout, Y, beta, lam):
        self.model = model
        self.layout = layout
        self.Y = Y
        self.beta = np.array(beta, dtype=float)
        self.lam = np.array(lam, dtype=float)
        R = model.n_responses
        rho, powers, taus = model.split_lambda(self.lam)
        self.rho, self.powers, self.taus = rho, powers, taus
        self.sigma_b = correlation_matrix(rho, R) if model.correlated else np.eye(R)
        if R > 1 and model.correlated:
            cholesky(self.sigma_b, "correlation matrix Sigma_b")
        betas = model.split_beta(self.beta)
        self.eta = np.column_stack([s.X @ b for s, b in zip(model.responses, betas)])
        self.mu = np.column_stack([s.link.inverse(self.eta[:, r]) for r, s in enumerate(model.responses)])
        self.mu_eta = np.column_stack([s.link.mu_eta(self.eta[:, r]) for r, s in enumerate(model.responses)])
        if not np.all(np.isfinite(self.mu)):
            raise NumericalError("non-finite fitted means")
        for r, spec in enumerate(model.responses):
            spec.variance.check_mu(self.mu[:, r], powers[r])
        self.resid = Y - self.mu
        self._blocks = [self._factor_group(g) for g in layout.groups]
        self._cache = {}

    # -- per-group assembly -------------------------------------------------

    def _factor_group(self, g):
        model = self.model
        R = model.n_responses
        out = {"s": [], "omega": [], "L": [], "mu": [], "X": [], "mu_eta": []}
        for r, spec in enumerate(model.responses):
            mu = self.mu[g.idx, r]
            vals = spec.variance.value(mu, self.powers[r])
            if not np.all(vals > 0):
                raise InvalidDispersionError(f"variance function not positive for response {spec.name!r}")
            s = np.sqrt(vals)
            omega = np.zeros(g.idx.shape + (g.size,))
            for t, z in zip(self.taus[r], g.zblocks[r]):
                omega += t * z
            sigma = sigma_from_blocks(omega, s, mu if spec.variance.is_count else None)
            L = cholesky(sigma, f"Sigma for response {spec.name!r}", tau=self.taus[r].copy())
            out["s"].append(s)
            out["omega"].append(omega)
            out["L"].append(L)
            out["mu"].append(mu)
            out["X"].append(spec.X[g.idx])
            out["mu_eta"].append(self.mu_eta[g.idx, r])
        if R == 1:
            C = sigma
        else:
            C = joint_from_factors(out["L"], self.sigma_b)
            cholesky(C, "joint covariance C", tau=np.concatenate(self.taus))
        out["C"] = C
        out["Cinv"] = np.linalg.inv(C)
        out["res"] = np.concatenate([self.resid[g.idx, r] for r in range(R)], axis=1)
        K = self.beta.size
        n = C.shape[-1]
        m = g.size
        D = np.zeros(g.idx.shape[:1] + (n, K))
        off = 0
        for r, spec in enumerate(model.responses):
            D[:, r * m:(r + 1) * m, off:off + spec.n_coef] = out["mu_eta"][r][..., None] * out["X"][r]
            off += spec.n_coef
        out["D"] = D
        return out

    def _propagate(self, blk, r, dsigma, dC):
        """Write the contribution of a Sigma_r perturbation into dC."""
        R = self.model.n_responses
        m = dsigma.shape[-1]
        sl = slice(r * m, (r + 1) * m)
        dC[..., sl, sl] = dsigma
        if R == 1:
            return
        dL = dchol(blk["L"][r], dsigma)
        for t in range(R):
            if t == r:
                continue
            st = slice(t * m, (t + 1) * m)
            piece = self.sigma_b[r, t] * (dL @ np.swapaxes(blk["L"][t], -1, -2))
            dC[..., sl, st] = piece
            dC[..., st, sl] = np.swapaxes(piece, -1, -2)

    def dC_dlambda(self, gi):
        """dC/dlambda_i for group ``gi``: array (Q, G, n, n)."""
        blk = self._blocks[gi]
        g = self.layout.groups[gi]
        model = self.model
        R = model.n_responses
        C = blk["C"]
        Q = self.lam.size
        dC = np.zeros((Q,) + C.shape)
        m = g.size
        q = 0
        if model.correlated:
            for a in range(R):
                for b in range(a + 1, R):
                    piece = blk["L"][a] @ np.swapaxes(blk["L"][b], -1, -2)
                    dC[q, :, a * m:(a + 1) * m, b * m:(b + 1) * m] = piece
                    dC[q, :, b * m:(b + 1) * m, a * m:(a + 1) * m] = np.swapaxes(piece, -1, -2)
                    q += 1
        for r, spec in enumerate(model.responses):
            if spec.power_fixed:
                continue
            s, omega = blk["s"][r], blk["omega"][r]
            for row in spec.variance.dlog_dp(blk["mu"][r], self.powers[r]):
                ds = 0.5 * s * row
                dsig = ds[..., :, None] * omega * s[..., None, :]
                dsig = dsig + np.swapaxes(dsig, -1, -2)
                self._propagate(blk, r, dsig, dC[q])
                q += 1
        for r, spec in enumerate(model.responses):
            s = blk["s"][r]
            for z in g.zblocks[r]:
                self._propagate(blk, r, sigma_from_blocks(z, s), dC[q])
                q += 1
        return dC

    def dC_dbeta(self, gi):
        """dC/dbeta_j for group ``gi``: array (K, G, n, n), or None if C ignores beta."""
        model = self.model
        if not any(_mu_dependent(s, p) for s, p in zip(model.responses, self.powers)):
            return None
        blk = self._blocks[gi]
        C = blk["C"]
        K = self.beta.size
        dC = np.zeros((K,) + C.shape)
        off = 0
        for r, spec in enumerate(model.responses):
            if _mu_dependent(spec, self.powers[r]):
                s, omega, mu = blk["s"][r], blk["omega"][r], blk["mu"][r]
                dlog = spec.variance.dlog_dmu(mu, self.powers[r])
                for j in range(spec.n_coef):
                    dmu = blk["mu_eta"][r] * blk["X"][r][..., j]
                    ds = 0.5 * s * dlog * dmu
                    dsig = ds[..., :, None] * omega * s[..., None, :]
                    dsig = dsig + np.swapaxes(dsig, -1, -2)
                    if spec.variance.is_count:
                        idx = np.arange(dsig.shape[-1])
                        dsig[..., idx, idx] += dmu
                    self._propagate(blk, r, dsig, dC[off + j])
            off += spec.n_coef
        return dC

    # -- estimating functions ----------------------------------------------

    def beta_parts(self):
        if "beta" not in self._cache:
            K = self.beta.size
            psi = np.zeros(K)
            V = np.zeros((K, K))
            for blk in self._blocks:
                u = np.einsum("gab,gb->ga", blk["Cinv"], blk["res"])
                CinvD = blk["Cinv"] @ blk["D"]
                blk["u"] = u
                blk["CinvD"] = CinvD
                psi += np.einsum("gak,ga->k", blk["D"], u)
                V += np.einsum("gak,gal->kl", blk["D"], CinvD)
            self._cache["beta"] = (psi, -V, V)
        return self._cache["beta"]

    def quasi_score(self):
        return self.beta_parts()[0]

    def lambda_parts(self, full=False):
        """psi_lambda and S_lambda; with ``full`` also V_lambda, S_lambda_beta, V_lambda_beta."""
        key = "lambda_full" if full else "lambda"
        if key in self._cache:
            return self._cache[key]
        if full:
            self.beta_parts()
        Q = self.lam.size
        K = self.beta.size
        psi = np.zeros(Q)
        S = np.zeros((Q, Q))
        extra = np.zeros((Q, Q))
        S_lb = np.zeros((Q, K))
        V_lb = np.zeros((Q, K))
        for gi, blk in enumerate(self._blocks):
            dC = self.dC_dlambda(gi)
            A = blk["Cinv"] @ dC
            u = np.einsum("gab,gb->ga", blk["Cinv"], blk["res"])
            psi += np.einsum("ga,igab,gb->i", u, dC, u) - np.einsum("igaa->i", A)
            S -= np.einsum("igab,jgba->ij", A, A)
            if full:
                res = blk["res"]
                wdiag = np.einsum("igab,gba->iga", A, blk["Cinv"])
                cdiag = np.einsum("gaa->ga", blk["C"])
                k4 = res**4 - 3.0 * cdiag**2
                extra += np.einsum("iga,jga,ga->ij", wdiag, wdiag, k4)
                V_lb += np.einsum("iga,ga,gak->ik", wdiag, res**3, blk["CinvD"])
                dCb = self.dC_dbeta(gi)
                if dCb is not None:
                    B = blk["Cinv"] @ dCb
                    S_lb -= np.einsum("igab,jgba->ij", A, B)
        if full:
            out = (psi, S, -2.0 * S + extra, S_lb, V_lb)
        else:
            out = (psi, S)
        self._cache[key] = out
        if full:
            self._cache["lambda"] = (psi, S)
        return out

    def pearson(self):
        return self.lambda_parts()[0]

    def godambe(self):
        psi_b, S_b, V_b = self.beta_parts()
        _, S_l, V_l, S_lb, V_lb = self.lambda_parts(full=True)
        K, Q = S_b.shape[0], S_l.shape[0]
        S = np.zeros((K + Q, K + Q))
        S[:K, :K] = S_b
        S[K:, :K] = S_lb
        S[K:, K:] = S_l
        V = np.zeros_like(S)
        V[:K, :K] = V_b
        V[K:, :K] = V_lb
        V[:K, K:] = V_lb.T
        V[K:, K:] = V_l
        return GodambeMatrices(S, V, godambe_inverse(S, V))

    def pearson_residuals(self):
        R = self.model.n_responses
        out = np.empty_like(self.resid)
        for g, blk in zip(self.layout.groups, self._blocks):
            cdiag = np.einsum("gaa->ga", blk["C"])
            m = g.size
            for r in range(R):
                out[g.idx, r] = blk["res"][:, r * m:(r + 1) * m] / np.sqrt(cdiag[:, r * m:(r + 1) * m])
        return out


# ---------------------------------------------------------------------------
# dense-matrix API
# ---------------------------------------------------------------------------


def _prepare_y(model, Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (model.n_obs, model.n_responses):
        raise ShapeError(f"response data has shape {Y.shape}, expected {(model.n_obs, model.n_responses)}")
    return Y


def _dense_eval(model, beta, lam, Y):
    return _Evaluation(model, ClusterLayout(model, dense=True), _prepare_y(model, Y), beta, lam)


def joint_covariance(model, beta, lam):
    """Dense joint covariance C at (beta, lambda)."""
    ev = _dense_eval(model, beta, lam, np.zeros((model.n_obs, model.n_responses)))
    return ev._blocks[0]["C"][0].copy()


def joint_c_derivatives(model, beta, lam):
    """Dense ``[dC/dlambda_i]`` in lambda order and ``[dC/dbeta_j]`` (or None)."""
    ev = _dense_eval(model, beta, lam, np.zeros((model.n_obs, model.n_responses)))
    dl = ev.dC_dlambda(0)[:, 0]
    db = ev.dC_dbeta(0)
    return list(dl), (None if db is None else list(db[:, 0]))


def quasi_score(model, beta, lam, Y):
    """Quasi-score ``D' C^{-1} (y - mu)`` and the gradient matrix ``D``."""
    ev = _dense_eval(model, beta, lam, Y)
    blk = ev._blocks[0]
    D = blk["D"][0]
    C = blk["C"][0]
    r = blk["res"][0]
    psi = D.T @ sla.cho_solve(sla.cho_factor(C, lower=True), r)
    return psi, D


def pearson_function(model, beta, lam, Y):
    """Pearson estimating function and the weight matrices ``W_i``."""
    ev = _dense_eval(model, beta, lam, Y)
    blk = ev._blocks[0]
    C = blk["C"][0]
    r = blk["res"][0]
    fac = sla.cho_factor(C, lower=True)
    dC = ev.dC_dlambda(0)[:, 0]
    W = []
    for d in dC:
        left = sla.cho_solve(fac, d)
        W.append(sla.cho_solve(fac, left.T).T)
    psi = np.array([r @ w @ r - np.trace(w @ C) for w in W])
    return psi, W


def _cinv_apply(C, B):
    try:
        fac = sla.cho_factor(C, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("joint covariance C is not positive definite") from None
    return sla.cho_solve(fac, B)


def variability_beta(D, C):
    """``D' C^{-1} D``."""
    D = np.asarray(D, dtype=float)
    V = D.T @ _cinv_apply(C, D)
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        col = int(np.argmin(np.abs(np.diag(np.linalg.qr(D, mode="r")))))
        raise SingularSensitivityError(f"regression sensitivity is singular (near column {col})") from None
    return V


def sensitivity_beta(D, C):
    """``-D' C^{-1} D``."""
    return -variability_beta(D, C)


def sensitivity_lambda(W, C):
    """Entries ``-tr(W_i C W_j C)``."""
    C = np.asarray(C, dtype=float)
    WC = [w @ C for w in W]
    Q = len(W)
    S = np.empty((Q, Q))
    for i in range(Q):
        for j in range(i, Q):
            S[i, j] = S[j, i] = -np.sum(WC[i] * WC[j].T)
    return S


def fourth_cumulant(r, C):
    """Empirical per-observation fourth cumulant ``r^4 - 3 C_ll^2``."""
    r = np.asarray(r, dtype=float)
    return r**4 - 3.0 * np.diag(C) ** 2


def variability_lambda(W, C, r):
    """Entries ``2 tr(W_i C W_j C) + sum_l k4_l (W_i)_ll (W_j)_ll``."""
    k4 = fourth_cumulant(r, C)
    diags = np.array([np.diag(w) for w in W])
    return -2.0 * sensitivity_lambda(W, C) + (diags * k4) @ diags.T


def cross_matrices(D, W, C, r, dC_dbeta=None):
    """Cross blocks ``(S_beta_lambda, S_lambda_beta, V_lambda_beta)``.

    ``S_beta_lambda`` is the zero block.  ``S_lambda_beta`` is
    ``-tr(W_i dC/dbeta_j)`` (zero when C does not depend on beta) and
    ``V_lambda_beta`` uses the empirical third cumulant ``r^3``.
    """
    D = np.asarray(D, dtype=float)
    r = np.asarray(r, dtype=float)
    K, Q = D.shape[1], len(W)
    S_bl = np.zeros((K, Q))
    S_lb = np.zeros((Q, K))
    if dC_dbeta is not None:
        for i, w in enumerate(W):
            for j, dc in enumerate(dC_dbeta):
                S_lb[i, j] = -np.sum(w * dc.T)
    CinvD = _cinv_apply(C, D)
    diags = np.array([np.diag(w) for w in W])
    V_lb = (diags * r**3) @ CinvD
    return S_bl, S_lb, V_lb


def godambe_inverse(S, V):
    """``S^{-1} V S^{-T}``, symmetrized."""
    S = np.asarray(S, dtype=float)
    V = np.asarray(V, dtype=float)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(S, check_finite=True)
        if np.any(np.abs(np.diag(lu[0])) <= np.finfo(float).eps * np.abs(lu[0]).max() * S.shape[0]):
            raise np.linalg.LinAlgError
        A = sla.lu_solve(lu, V)
        J = sla.lu_solve(lu, A.T).T
    except (np.linalg.LinAlgError, ValueError):
        raise SingularInformationError("joint sensitivity matrix is singular") from None
    return 0.5 * (J + J.T)


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class McglmFit:
    """Result of :func:`fit`.  ``theta`` follows ``model.parameter_map``."""

    model: McglmModel
    Y: np.ndarray
    theta: np.ndarray
    godambe: GodambeMatrices
    fitted: np.ndarray
    linear_predictor: np.ndarray
    pearson_residuals: np.ndarray
    converged: bool
    iterations: int
    norm_history: tuple
    options: FitOptions
    rows: np.ndarray = field(default=None)

    @property
    def parameter_map(self):
        return self.model.parameter_map

    @property
    def beta(self):
        return self.theta[: self.parameter_map.n_beta]

    @property
    def lam(self):
        return self.theta[self.parameter_map.n_beta:]

    @property
    def vcov(self):
        return self.godambe.inverse

    @property
    def std_errors(self):
        return np.sqrt(np.diag(self.godambe.inverse))

    @property
    def theta_star(self):
        """Estimates without the correlation parameters."""
        return self.theta[self.parameter_map.scope]

    @property
    def vcov_star(self):
        sc = self.parameter_map.scope
        return self.godambe.inverse[np.ix_(sc, sc)]

    def coef_table(self, level: float = 0.95):
        """Rows of (label, estimate, se, lower, upper, z, p-value)."""
        from scipy.stats import norm

        from .wald import chi2_sf

        q = norm.ppf(0.5 + level / 2.0)
        rows = []
        for label, est, se in zip(self.parameter_map.labels, self.theta, self.std_errors):
            z = est / se
            rows.append({"parameter": label, "estimate": est, "std_error": se,
                         "lower": est - q * se, "upper": est + q * se,
                         "wald": z * z, "p_value": chi2_sf(z * z, 1)})
        return rows


def _initial_beta(model, Y):
    out = []
    for r, spec in enumerate(model.responses):
        y = Y[:, r]
        if spec.link.kind == "logit":
            ystart = (y + 0.5) / 2.0
        elif spec.link.kind == "log":
            ystart = (y + np.mean(y)) / 2.0
            ystart = np.where(ystart > 0, ystart, 0.1)
        else:
            ystart = y
        z = spec.link.link(ystart)
        out.append(np.linalg.lstsq(spec.X, z, rcond=None)[0])
    return np.concatenate(out)


def initial_lambda(model):
    parts = [np.zeros(model.n_rho)]
    for spec in model.responses:
        if not spec.power_fixed:
            parts.append(spec.variance.initial_powers())
    for mp in model.predictors:
        tau = np.zeros(mp.n_components)
        tau[0] = 1.0
        parts.append(tau)
    return np.concatenate(parts)


_RECOVERABLE = (NotPositiveDefiniteError, InvalidDispersionError, DomainError, NumericalError,
                np.linalg.LinAlgError, FloatingPointError)


def fit(model: McglmModel, Y, options: FitOptions | None = None, beta0=None, lambda0=None) -> McglmFit:
    """Fit ``model`` to the ``N x R`` response matrix ``Y`` by the modified chaser.

    Rows with a missing value in any response are dropped first.
    """
    options = options or FitOptions()
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (model.n_obs, model.n_responses):
        raise ShapeError(f"response data has shape {Y.shape}, expected {(model.n_obs, model.n_responses)}")
    keep = np.flatnonzero(np.all(np.isfinite(Y), axis=1))
    if keep.size < model.n_obs:
        logger.info("dropping %d rows with missing responses", model.n_obs - keep.size)
        model = model.subset(keep)
        Y = Y[keep]
    for spec in model.responses:
        spec.check_rank()

    layout = ClusterLayout(model)
    beta = _initial_beta(model, Y) if beta0 is None else np.asarray(beta0, dtype=float)
    lam = initial_lambda(model) if lambda0 is None else np.asarray(lambda0, dtype=float)

    ev = _Evaluation(model, layout, Y, beta, lam)
    history = []
    converged = False
    it = 0
    for it in range(1, options.max_iter + 1):
        psi_b, S_b, _ = ev.beta_parts()
        psi_l, _ = ev.lambda_parts()
        norm = max(np.max(np.abs(psi_b)), np.max(np.abs(psi_l)) if psi_l.size else 0.0)
        history.append(float(norm))
        if options.verbose:
            logger.info("iteration %d: max|psi| = %.3e", it, norm)
        if not np.isfinite(norm):
            raise NumericalError("estimating functions became non-finite")
        if norm < options.tol:
            converged = True
            break

        try:
            step_b = -np.linalg.solve(S_b, psi_b)
        except np.linalg.LinAlgError:
            raise SingularSensitivityError("regression sensitivity matrix is singular") from None
        ev = _halving(lambda t: _Evaluation(model, layout, Y, ev.beta + t * step_b, ev.lam),
                      1.0, options.max_halving, "regression step")

        psi_l, S_l = ev.lambda_parts()
        if psi_l.size:
            try:
                step_l = -np.linalg.solve(S_l, psi_l)
            except np.linalg.LinAlgError:
                raise SingularSensitivityError("dispersion sensitivity matrix is singular") from None
            base = np.max(np.abs(psi_l))
            beta_now, lam_now = ev.beta, ev.lam

            def propose(t):
                cand = _Evaluation(model, layout, Y, beta_now, lam_now + t * step_l)
                return cand, np.max(np.abs(cand.pearson())) <= 10.0 * base + options.tol

            ev = _halving(propose, options.alpha, options.max_halving, "dispersion step", check=True)
    else:
        it = options.max_iter

    if not converged:
        logger.warning("chaser did not converge in %d iterations (max|psi| = %.3e)", options.max_iter, history[-1])

    god = ev.godambe()
    theta = np.concatenate([ev.beta, ev.lam])
    return McglmFit(model=model, Y=Y, theta=theta, godambe=god, fitted=ev.mu.copy(),
                    linear_predictor=ev.eta.copy(), pearson_residuals=ev.pearson_residuals(),
                    converged=converged, iterations=it, norm_history=tuple(history),
                    options=options, rows=keep)


def _halving(make, t0, limit, what, check=False):
    """Try step sizes t0, t0/2, ... ; return the first acceptable evaluation."""
    t = t0
    last_ok = None
    last_err = None
    for _ in range(limit + 1):
        try:
            if check:
                cand, good = make(t)
                if good:
                    return cand
                last_ok = cand
            else:
                return make(t)
        except _RECOVERABLE as exc:
            last_err = exc
        t *= 0.5
    if last_ok is not None:
        return last_ok
    if isinstance(last_err, NotPositiveDefiniteError):
        raise NotPositiveDefiniteError(f"{what}: covariance stayed infeasible after {limit} halvings",
                                       tau=last_err.tau)
    raise NumericalError(f"{what}: no feasible step after {limit} halvings ({last_err})")
