"""Model objects and covariance assembly for multivariate covariance GLMs.

A model is a list of responses, each with its own link function, variance
function, design matrix and matrix linear predictor

    Omega(tau_r) = tau_r0 * Z_0 + ... + tau_rD * Z_D,

combined into the joint covariance of the stacked responses through the
generalized Kronecker product

    C = Bdiag(L_1, ..., L_R) (Sigma_b kron I) Bdiag(L_1', ..., L_R'),

where ``L_r`` is the lower Cholesky factor of the within-response covariance
``Sigma_r``.  All objects here are immutable once built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import (
    ConfigError,
    DomainError,
    InvalidDispersionError,
    NotPositiveDefiniteError,
    ShapeError,
)

LINK_KINDS = ("identity", "log", "logit")
VARIANCE_KINDS = ("power", "poisson_tweedie", "binomial")


# ---------------------------------------------------------------------------
# link functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkFunction:
    """Standard link ``g`` mapping the mean to the linear predictor."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ConfigError(f"unknown link function {self.kind!r}; expected one of {LINK_KINDS}")

    def link(self, mu):
        """eta = g(mu)."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "identity":
            return mu.copy()
        if self.kind == "log":
            _check_domain(mu, mu > 0, "log link requires mu > 0")
            return np.log(mu)
        _check_domain(mu, (mu > 0) & (mu < 1), "logit link requires 0 < mu < 1")
        return np.log(mu) - np.log1p(-mu)

    def inverse(self, eta):
        """mu = g^{-1}(eta)."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return eta.copy()
        if self.kind == "log":
            return np.exp(eta)
        return expit(eta)

    def mu_eta(self, eta):
        """Derivative d mu / d eta evaluated at ``eta``."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return np.ones_like(eta)
        if self.kind == "log":
            return np.exp(eta)
        m = expit(eta)
        return m * (1.0 - m)


def _check_domain(values, ok, message):
    ok = np.asarray(ok)
    if not np.all(ok):
        bad = np.flatnonzero(~ok.ravel())[0]
        raise DomainError(f"{message}; offending index {bad} (value {np.ravel(values)[bad]!r})")


def _as_link(link) -> LinkFunction:
    return link if isinstance(link, LinkFunction) else LinkFunction(str(link))


def link_eval(link, mu):
    """Apply the link: ``eta = g(mu)``."""
    return _as_link(link).link(mu)


def link_inverse(link, eta):
    """Apply the inverse link: ``mu = g^{-1}(eta)``."""
    return _as_link(link).inverse(eta)


def link_mu_derivative(link, eta):
    """Return ``d mu / d eta`` at ``eta``."""
    return _as_link(link).mu_eta(eta)


# ---------------------------------------------------------------------------
# variance functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceFunction:
    """Variance function ``vartheta(mu; p)``.

    ``power`` holds the exponent(s).  For ``binomial`` a scalar means the same
    exponent on ``mu`` and ``1 - mu``; a pair ``(p1, p2)`` gives each its own
    exponent (two power parameters when estimated).

    ``poisson_tweedie`` marks a count response: its covariance gets the extra
    ``diag(mu)`` term and uses the plain power function inside the
    ``V^{1/2} Omega V^{1/2}`` product.
    """

    kind: str = "power"
    power: float | tuple[float, float] = 1.0

    def __post_init__(self):
        if self.kind not in VARIANCE_KINDS:
            raise ConfigError(f"unknown variance function {self.kind!r}; expected one of {VARIANCE_KINDS}")
        p = self.power
        if isinstance(p, (tuple, list, np.ndarray)):
            p = tuple(float(v) for v in p)
            if self.kind != "binomial" or len(p) != 2:
                raise ConfigError("only the binomial variance accepts a pair of power parameters")
        else:
            p = float(p)
        object.__setattr__(self, "power", p)

    @property
    def n_powers(self) -> int:
        return 2 if isinstance(self.power, tuple) else 1

    @property
    def is_count(self) -> bool:
        return self.kind == "poisson_tweedie"

    def initial_powers(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.power, dtype=float))

    def _exponents(self, p):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if p.size != self.n_powers:
            raise ShapeError(f"{self.kind} variance expects {self.n_powers} power value(s), got {p.size}")
        return p

    def check_mu(self, mu, p):
        p = self._exponents(p)
        if self.kind == "binomial":
            _check_domain(mu, (mu > 0) & (mu < 1), "binomial variance requires 0 < mu < 1")
        elif p[0] != 0:
            _check_domain(mu, mu > 0, "power variance with p != 0 requires mu > 0")

    def value(self, mu, p):
        """Variance function entering ``V(mu; p)`` (plain power for counts)."""
        mu = np.asarray(mu, dtype=float)
        p = self._exponents(p)
        self.check_mu(mu, p)
        if self.kind == "binomial":
            p1, p2 = (p[0], p[0]) if p.size == 1 else p
            return mu**p1 * (1.0 - mu) ** p2
        if p[0] == 0:
            return np.ones_like(mu)
        return mu ** p[0]

    def dlog_dmu(self, mu, p):
        """d log vartheta / d mu."""
        mu = np.asarray(mu, dtype=float)
        p = self._exponents(p)
        if self.kind == "binomial":
            p1, p2 = (p[0], p[0]) if p.size == 1 else p
            return p1 / mu - p2 / (1.0 - mu)
        if p[0] == 0:
            return np.zeros_like(mu)
        return p[0] / mu

    def dlog_dp(self, mu, p):
        """d log vartheta / d p_k, one row per power parameter."""
        mu = np.asarray(mu, dtype=float)
        p = self._exponents(p)
        if self.kind == "binomial":
            if p.size == 1:
                return (np.log(mu) + np.log1p(-mu))[None]
            return np.stack([np.log(mu), np.log1p(-mu)])
        if np.any(mu <= 0):
            raise DomainError("estimating the power parameter requires mu > 0")
        return np.log(mu)[None]


def _as_variance(v) -> VarianceFunction:
    return v if isinstance(v, VarianceFunction) else VarianceFunction(str(v))


def variance_eval(varfun, mu, p, tau=None):
    """Diagonal of ``V(mu; p)``.

    For ``poisson_tweedie`` this returns the dispersion function
    ``mu + tau * mu**p`` and ``tau`` is required.
    """
    varfun = _as_variance(varfun)
    mu = np.asarray(mu, dtype=float)
    if varfun.kind == "poisson_tweedie":
        if tau is None:
            raise ConfigError("poisson_tweedie dispersion function needs tau")
        _check_domain(mu, mu > 0, "poisson_tweedie requires mu > 0")
        out = mu + float(tau) * mu ** varfun._exponents(p)[0]
    else:
        out = varfun.value(mu, p)
    if not np.all(out > 0):
        bad = int(np.flatnonzero(~(out > 0))[0])
        raise InvalidDispersionError(f"variance function is not positive at index {bad} (value {out[bad]!r})")
    return out


# ---------------------------------------------------------------------------
# matrix linear predictor
# ---------------------------------------------------------------------------


class MatrixPredictor:
    """Known symmetric matrices ``Z_0 ... Z_D`` of a matrix linear predictor.

    Components are stored as CSR sparse matrices; dense input is accepted and
    converted.  Only the identity covariance link is supported.
    """

    def __init__(self, components: Sequence, covariance_link: str = "identity"):
        if covariance_link != "identity":
            raise ConfigError(f"covariance link {covariance_link!r} is not supported (identity only)")
        comps = [sp.csr_matrix(np.asarray(z, dtype=float) if not sp.issparse(z) else z, dtype=float)
                 for z in components]
        if not comps:
            raise ShapeError("a matrix predictor needs at least one component")
        n = comps[0].shape[0]
        for d, z in enumerate(comps):
            if z.shape != (n, n):
                raise ShapeError(f"component Z_{d} has shape {z.shape}, expected {(n, n)}")
            asym = abs(z - z.T)
            if asym.nnz and asym.max() != 0:
                raise ShapeError(f"component Z_{d} is not symmetric")
            z.sort_indices()
        self._components = tuple(comps)
        self.covariance_link = covariance_link

    @classmethod
    def identity(cls, n: int) -> "MatrixPredictor":
        return cls([sp.identity(n, format="csr")])

    @property
    def components(self) -> tuple:
        return self._components

    @property
    def n_obs(self) -> int:
        return self._components[0].shape[0]

    @property
    def n_components(self) -> int:
        return len(self._components)

    def subset(self, rows) -> "MatrixPredictor":
        rows = np.asarray(rows)
        return MatrixPredictor([z[rows][:, rows] for z in self._components], self.covariance_link)

    def __repr__(self):
        return f"MatrixPredictor(n_obs={self.n_obs}, n_components={self.n_components})"


def build_omega(mp: MatrixPredictor, tau) -> np.ndarray:
    """Dense ``Omega = sum_d tau_d Z_d``."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.size != mp.n_components:
        raise ShapeError(f"tau has {tau.size} entries but the predictor has {mp.n_components} components")
    omega = np.zeros((mp.n_obs, mp.n_obs))
    for t, z in zip(tau, mp.components):
        omega += t * z.toarray()
    return omega


# ---------------------------------------------------------------------------
# responses and models
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResponseSpec:
    """One response: link, variance function, design matrix and power policy.

    ``design`` (a :class:`~mcglm_wald.design.Design`) is optional metadata
    describing how ``X`` was built from data; ANOVA and multiple-comparison
    tables use its term structure and factor levels.
    """

    X: np.ndarray
    link: LinkFunction = field(default_factory=LinkFunction)
    variance: VarianceFunction = field(default_factory=VarianceFunction)
    power_fixed: bool = True
    name: str = "y"
    column_names: tuple[str, ...] | None = None
    design: object = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ShapeError("design matrix must be two-dimensional")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "link", _as_link(self.link))
        object.__setattr__(self, "variance", _as_variance(self.variance))
        names = self.column_names
        if names is None:
            names = tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ShapeError("column_names length does not match the design matrix")
        object.__setattr__(self, "column_names", tuple(names))

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    @property
    def n_powers(self) -> int:
        return 0 if self.power_fixed else self.variance.n_powers

    def check_rank(self):
        """Raise if ``X`` is column-rank deficient (pivoted QR)."""
        from scipy.linalg import qr

        from .errors import SingularSensitivityError

        X = self.X
        if X.shape[0] < X.shape[1]:
            raise SingularSensitivityError(f"response {self.name!r}: more columns than observations")
        _, R, piv = qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        bad = np.flatnonzero(diag <= tol)
        if bad.size:
            col = self.column_names[piv[bad[0]]]
            raise SingularSensitivityError(f"response {self.name!r}: design column {col!r} is linearly dependent")

    def subset(self, rows) -> "ResponseSpec":
        rows = np.asarray(rows)
        return ResponseSpec(self.X[rows], self.link, self.variance, self.power_fixed,
                            self.name, self.column_names, self.design)


@dataclass(frozen=True)
class Parameter:
    label: str
    kind: str  # beta | rho | power | tau
    response: int | None
    position: int


class ParameterMap:
    """Ordered index map of theta = (beta, rho, power, tau).

    beta is stacked by response then by design column; lambda follows as the
    correlations (upper triangle of Sigma_b, row-major), the estimated power
    parameters by response, then the dispersion parameters by response.
    """

    def __init__(self, params: Sequence[Parameter], n_responses: int):
        self.params = tuple(params)
        self.n_responses = n_responses
        self.labels = tuple(p.label for p in self.params)
        kinds = np.array([p.kind for p in self.params])
        self._kinds = kinds
        self.n_beta = int(np.sum(kinds == "beta"))
        self.n_lambda = len(self.params) - self.n_beta

    def __len__(self):
        return len(self.params)

    def indices(self, kind: str | None = None, response: int | None = None) -> np.ndarray:
        out = [i for i, p in enumerate(self.params)
               if (kind is None or p.kind == kind) and (response is None or p.response == response)]
        return np.asarray(out, dtype=int)

    @property
    def scope(self) -> np.ndarray:
        """Indices of every non-correlation parameter, in theta order."""
        return np.flatnonzero(self._kinds != "rho")

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown parameter {label!r}") from None


@dataclass(frozen=True, eq=False)
class McglmModel:
    """A multivariate covariance GLM.

    ``predictors`` holds one :class:`MatrixPredictor` per response (a single
    predictor is shared by all responses).  With ``correlated=False`` the
    between-response correlation matrix is fixed at the identity and no
    correlation parameters are estimated.
    """

    responses: tuple
    predictors: tuple
    correlated: bool = True

    def __post_init__(self):
        responses = tuple(self.responses)
        if not responses:
            raise ConfigError("a model needs at least one response")
        preds = self.predictors
        if isinstance(preds, MatrixPredictor):
            preds = (preds,) * len(responses)
        preds = tuple(preds)
        if len(preds) == 1 and len(responses) > 1:
            preds = preds * len(responses)
        if len(preds) != len(responses):
            raise ShapeError("need one matrix predictor per response")
        n = responses[0].n_obs
        for r, (spec, mp) in enumerate(zip(responses, preds)):
            if spec.n_obs != n:
                raise ShapeError(f"response {r} has {spec.n_obs} rows, expected {n}")
            if mp.n_obs != n:
                raise ShapeError(f"matrix predictor of response {r} has order {mp.n_obs}, expected {n}")
        names = [s.name for s in responses]
        if len(set(names)) != len(names):
            raise ConfigError(f"response names must be unique, got {names}")
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "predictors", preds)
        object.__setattr__(self, "parameter_map", self._build_map())

    @property
    def n_obs(self) -> int:
        return self.responses[0].n_obs

    @property
    def n_responses(self) -> int:
        return len(self.responses)

    @property
    def n_rho(self) -> int:
        R = self.n_responses
        return R * (R - 1) // 2 if self.correlated else 0

    def _build_map(self) -> ParameterMap:
        params = []
        for r, spec in enumerate(self.responses):
            for j, col in enumerate(spec.column_names):
                params.append(Parameter(f"{spec.name}:{col}", "beta", r, j))
        if self.correlated:
            k = 0
            for a in range(self.n_responses):
                for b in range(a + 1, self.n_responses):
                    na, nb = self.responses[a].name, self.responses[b].name
                    params.append(Parameter(f"rho[{na},{nb}]", "rho", None, k))
                    k += 1
        for r, spec in enumerate(self.responses):
            n = spec.n_powers
            for k in range(n):
                suffix = "power" if n == 1 else f"power{k + 1}"
                params.append(Parameter(f"{spec.name}:{suffix}", "power", r, k))
        for r, (spec, mp) in enumerate(zip(self.responses, self.predictors)):
            for d in range(mp.n_components):
                params.append(Parameter(f"{spec.name}:tau{d}", "tau", r, d))
        return ParameterMap(params, self.n_responses)

    def subset(self, rows) -> "McglmModel":
        rows = np.asarray(rows)
        return McglmModel(tuple(s.subset(rows) for s in self.responses),
                          tuple(mp.subset(rows) for mp in self.predictors), self.correlated)

    def split_lambda(self, lam):
        """Split lambda into (rho, [powers per response], [tau per response])."""
        lam = np.asarray(lam, dtype=float)
        pos = self.n_rho
        rho = lam[:pos]
        powers, taus = [], []
        for spec in self.responses:
            if spec.power_fixed:
                powers.append(spec.variance.initial_powers())
            else:
                powers.append(lam[pos:pos + spec.n_powers])
                pos += spec.n_powers
        for mp in self.predictors:
            taus.append(lam[pos:pos + mp.n_components])
            pos += mp.n_components
        if pos != lam.size:
            raise ShapeError(f"lambda has {lam.size} entries, model expects {pos}")
        return rho, powers, taus

    def split_beta(self, beta):
        beta = np.asarray(beta, dtype=float)
        out, pos = [], 0
        for spec in self.responses:
            out.append(beta[pos:pos + spec.n_coef])
            pos += spec.n_coef
        if pos != beta.size:
            raise ShapeError(f"beta has {beta.size} entries, model expects {pos}")
        return out


# ---------------------------------------------------------------------------
# covariance assembly
# ---------------------------------------------------------------------------


def correlation_matrix(rho, n_responses: int) -> np.ndarray:
    """Sigma_b with ``rho`` filling the upper triangle row-major."""
    rho = np.asarray(rho, dtype=float)
    R = n_responses
    Sb = np.eye(R)
    if rho.size == 0:
        return Sb
    if rho.size != R * (R - 1) // 2:
        raise ShapeError(f"expected {R * (R - 1) // 2} correlation parameters, got {rho.size}")
    iu = np.triu_indices(R, 1)
    Sb[iu] = rho
    Sb[(iu[1], iu[0])] = rho
    return Sb


def cholesky(A, what="matrix", tau=None):
    """Lower Cholesky factor (batched); non-PD input raises NotPositiveDefiniteError."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefiniteError(f"{what} has non-finite entries", tau=tau)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"{what} is not positive definite", tau=tau) from None


def sigma_from_blocks(omega, s, mu=None):
    """``diag(s) Omega diag(s)`` (plus ``diag(mu)`` for counts), batched on leading axes."""
    sigma = s[..., :, None] * omega * s[..., None, :]
    if mu is not None:
        idx = np.arange(sigma.shape[-1])
        sigma[..., idx, idx] += mu
    return sigma


def build_sigma_r(spec: ResponseSpec, mp: MatrixPredictor, mu, tau, p=None, count=None) -> np.ndarray:
    """Within-response covariance Sigma_r (dense).

    ``count`` defaults to the variance function's count flag; passing it
    explicitly selects the count (``True``) or continuous (``False``) formula.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (mp.n_obs,):
        raise ShapeError(f"mu has shape {mu.shape}, expected ({mp.n_obs},)")
    if p is None:
        p = spec.variance.initial_powers()
    if count is None:
        count = spec.variance.is_count
    omega = build_omega(mp, tau)
    vals = spec.variance.value(mu, p)
    if not np.all(vals > 0):
        raise InvalidDispersionError("variance function is not positive")
    sigma = sigma_from_blocks(omega, np.sqrt(vals), mu if count else None)
    cholesky(sigma, f"Sigma for response {spec.name!r}", tau=np.asarray(tau, dtype=float))
    return sigma


def joint_from_factors(factors, sigma_b) -> np.ndarray:
    """Generalized Kronecker product from Cholesky factors (batched on leading axes)."""
    R = len(factors)
    m = factors[0].shape[-1]
    lead = factors[0].shape[:-2]
    C = np.empty(lead + (R * m, R * m))
    for a in range(R):
        for b in range(a, R):
            if a == b:
                blk = factors[a] @ np.swapaxes(factors[a], -1, -2)
            else:
                blk = sigma_b[a, b] * (factors[a] @ np.swapaxes(factors[b], -1, -2))
            C[..., a * m:(a + 1) * m, b * m:(b + 1) * m] = blk
            if a != b:
                C[..., b * m:(b + 1) * m, a * m:(a + 1) * m] = np.swapaxes(blk, -1, -2)
    return C


def build_joint_c(sigmas: Sequence, sigma_b) -> tuple[np.ndarray, np.ndarray]:
    """Joint covariance ``C`` of the stacked responses and its Cholesky factor."""
    sigmas = [np.asarray(s, dtype=float) for s in sigmas]
    sigma_b = np.atleast_2d(np.asarray(sigma_b, dtype=float))
    R = len(sigmas)
    if sigma_b.shape != (R, R):
        raise ShapeError(f"Sigma_b has shape {sigma_b.shape}, expected {(R, R)}")
    if not np.allclose(np.diag(sigma_b), 1.0, rtol=0, atol=1e-12) or not np.array_equal(sigma_b, sigma_b.T):
        raise ShapeError("Sigma_b must be symmetric with unit diagonal")
    cholesky(sigma_b, "Sigma_b")
    factors = [cholesky(s, f"Sigma_{r}") for r, s in enumerate(sigmas)]
    if R == 1:
        C = sigmas[0].copy()
        return C, factors[0]
    C = joint_from_factors(factors, sigma_b)
    return C, cholesky(C, "joint covariance C")


def dchol(L, dA):
    """Forward-mode derivative of the Cholesky factor.

    Given ``A = L L'`` and a symmetric perturbation ``dA``, returns ``dL`` with
    ``dA = dL L' + L dL'`` and ``dL`` lower triangular.  Batched over leading
    axes of ``dA`` (``L`` broadcasts).
    """
    Linv = np.linalg.inv(L)
    M = Linv @ dA @ np.swapaxes(Linv, -1, -2)
    phi = np.tril(M)
    idx = np.arange(M.shape[-1])
    phi[..., idx, idx] *= 0.5
    return L @ phi
