"""Monte Carlo power studies for the Wald tests.

Data with correlated responses come from a Gaussian copula: multivariate
normal draws with correlation ``Sigma_b`` are mapped through the standard
normal CDF and each marginal's quantile function.  For every replicate a
model is fitted once and the 20 null hypotheses of a grid are tested against
it; the rejection rate per hypothesis, plotted against the normalized
distance of the hypothesis from the truth, gives a power curve.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.special import expit, ndtr

from .errors import ConfigError, DegenerateGridError, McglmError, NotPositiveDefiniteError, NumericalError
from .estimation import FitOptions, fit
from .model_core import MatrixPredictor, McglmModel, ResponseSpec, VarianceFunction
from .wald import kronecker_hypothesis, wald_test

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20220601

#: between-response correlation of the trivariate scenarios
TRIVARIATE_CORRELATION = np.array([[1.0, 0.75, 0.5],
                                   [0.75, 1.0, 0.25],
                                   [0.5, 0.25, 1.0]])

# Null-hypothesis grids, one row per hypothesis H01..H20.
_GRID_NORMAL = [
    (5, 0, 0, 0), (4.85, 0.05, 0.05, 0.05), (4.7, 0.1, 0.1, 0.1), (4.55, 0.15, 0.15, 0.15),
    (4.4, 0.2, 0.2, 0.2), (4.25, 0.25, 0.25, 0.25), (4.1, 0.3, 0.3, 0.3), (3.95, 0.35, 0.35, 0.35),
    (3.8, 0.4, 0.4, 0.4), (3.65, 0.45, 0.45, 0.45), (3.5, 0.5, 0.5, 0.5), (3.35, 0.55, 0.55, 0.55),
    (3.2, 0.6, 0.6, 0.6), (3.05, 0.65, 0.65, 0.65), (2.9, 0.7, 0.7, 0.7), (2.75, 0.75, 0.75, 0.75),
    (2.6, 0.8, 0.8, 0.8), (2.45, 0.85, 0.85, 0.85), (2.3, 0.9, 0.9, 0.9), (2.15, 0.95, 0.95, 0.95),
]
_GRID_POISSON = [
    (2.3, 0, 0, 0), (2.25, 0.017, 0.017, 0.017), (2.2, 0.033, 0.033, 0.033), (2.15, 0.05, 0.05, 0.05),
    (2.10, 0.067, 0.067, 0.067), (2.05, 0.083, 0.083, 0.083), (2, 0.1, 0.1, 0.1),
    (1.95, 0.117, 0.117, 0.117), (1.9, 0.133, 0.133, 0.133), (1.85, 0.15, 0.15, 0.15),
    (1.8, 0.167, 0.167, 0.167), (1.75, 0.167, 0.167, 0.167), (1.7, 0.2, 0.2, 0.2),
    (1.65, 0.217, 0.217, 0.217), (1.6, 0.233, 0.233, 0.233), (1.55, 0.25, 0.25, 0.25),
    (1.5, 0.267, 0.267, 0.267), (1.45, 0.283, 0.283, 0.283), (1.4, 0.3, 0.3, 0.3),
    (1.35, 0.317, 0.317, 0.317),
]
_GRID_BERNOULLI = [
    (0.5, 0, 0, 0), (0.250, 0.083, 0.083, 0.083), (0, 0.167, 0.167, 0.167), (-0.25, 0.25, 0.25, 0.25),
    (-0.500, 0.333, 0.333, 0.333), (-0.750, 0.417, 0.417, 0.417), (-1.0, 0.5, 0.5, 0.5),
    (-1.250, 0.583, 0.583, 0.583), (-1.500, 0.667, 0.667, 0.667), (-1.75, 0.75, 0.75, 0.75),
    (-2.000, 0.833, 0.833, 0.833), (-2.250, 0.917, 0.917, 0.917), (-2.5, 1.0, 1.0, 1.0),
    (-2.750, 1.083, 1.083, 1.083), (-3.000, 1.167, 1.167, 1.167), (-3.25, 1.25, 1.25, 1.25),
    (-3.500, 1.333, 1.333, 1.333), (-3.750, 1.417, 1.417, 1.417), (-4.0, 1.5, 1.5, 1.5),
    (-4.250, 1.583, 1.583, 1.583),
]
_GRID_DISPERSION = [
    (1, 0), (0.98, 0.02), (0.96, 0.04), (0.94, 0.06), (0.92, 0.08), (0.9, 0.1), (0.88, 0.12),
    (0.86, 0.14), (0.84, 0.16), (0.82, 0.18), (0.8, 0.2), (0.78, 0.22), (0.76, 0.24), (0.74, 0.26),
    (0.72, 0.28), (0.7, 0.3), (0.68, 0.32), (0.66, 0.34), (0.64, 0.36), (0.62, 0.38),
]

DISTRIBUTIONS = ("normal", "poisson", "bernoulli")
TARGETS = ("regression", "dispersion")

#: parameter values used to simulate, per distribution and target
TRUTH = {
    ("normal", "regression"): (5.0, 0.0, 0.0, 0.0),
    ("poisson", "regression"): (2.3, 0.0, 0.0, 0.0),
    ("bernoulli", "regression"): (0.5, 0.0, 0.0, 0.0),
    ("normal", "dispersion"): (1.0, 0.0),
    ("poisson", "dispersion"): (1.0, 0.0),
    ("bernoulli", "dispersion"): (1.0, 0.0),
}


# ---------------------------------------------------------------------------
# marginals and the copula sampler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginalSpec:
    distribution: str
    mean: float = 0.0
    sd: float = 1.0
    rate: float = 1.0
    prob: float = 0.5

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown marginal {self.distribution!r}")
        if self.distribution == "normal" and not self.sd > 0:
            raise ConfigError("normal marginal needs sd > 0")
        if self.distribution == "poisson" and not self.rate > 0:
            raise ConfigError("poisson marginal needs rate > 0")
        if self.distribution == "bernoulli" and not 0 < self.prob < 1:
            raise ConfigError("bernoulli marginal needs 0 < prob < 1")

    @classmethod
    def normal(cls, mean, sd):
        return cls("normal", mean=mean, sd=sd)

    @classmethod
    def poisson(cls, rate):
        return cls("poisson", rate=rate)

    @classmethod
    def bernoulli(cls, prob):
        return cls("bernoulli", prob=prob)

    @property
    def expected(self) -> float:
        return {"normal": self.mean, "poisson": self.rate, "bernoulli": self.prob}[self.distribution]

    @property
    def variance(self) -> float:
        return {"normal": self.sd**2, "poisson": self.rate,
                "bernoulli": self.prob * (1 - self.prob)}[self.distribution]

    def from_normal(self, z):
        """Transform standard normal scores through this marginal's quantile function."""
        if self.distribution == "normal":
            return self.mean + self.sd * z
        if self.distribution == "bernoulli":
            # u > 1 - p  <=>  z > Phi^{-1}(1 - p)
            return (z > stats.norm.ppf(1.0 - self.prob)).astype(float)
        u = np.minimum(ndtr(z), np.nextafter(1.0, 0.0))
        return stats.poisson.ppf(u, self.rate)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _copula_draw(marginals, corr, n, rng):
    L = np.linalg.cholesky(corr)
    z = rng.standard_normal((n, len(marginals))) @ L.T
    return np.column_stack([m.from_normal(z[:, r]) for r, m in enumerate(marginals)])


def match_copula_correlation(marginals, sigma_b, probes=100_000, tol=0.01, seed=DEFAULT_SEED):
    """Copula correlation whose output product-moment correlation hits ``sigma_b``.

    Bisection per off-diagonal entry on Monte Carlo correlation estimates.
    """
    sigma_b = np.asarray(sigma_b, dtype=float)
    R = sigma_b.shape[0]
    out = np.eye(R)
    for a in range(R):
        for b in range(a + 1, R):
            target = sigma_b[a, b]
            pair = [marginals[a], marginals[b]]

            def achieved(c):
                corr = np.array([[1.0, c], [c, 1.0]])
                x = _copula_draw(pair, corr, probes, np.random.default_rng(seed))
                return np.corrcoef(x.T)[0, 1]

            lo, hi = (0.0, 0.999) if target >= 0 else (-0.999, 0.0)
            c = target
            for _ in range(40):
                c = 0.5 * (lo + hi)
                val = achieved(c)
                if abs(val - target) < tol:
                    break
                if val < target:
                    lo = c
                else:
                    hi = c
            out[a, b] = out[b, a] = c
    try:
        np.linalg.cholesky(out)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("matched copula correlation is not positive definite") from None
    return out


def norta_sample(marginals, sigma_b, n: int, seed=None, match: bool = False) -> np.ndarray:
    """``n x R`` sample with the given marginals and copula correlation ``sigma_b``.

    By default ``sigma_b`` is used directly as the copula correlation, which is
    exact for normal marginals and attenuates the correlation of discrete
    ones; ``match=True`` first solves for the copula correlation that
    reproduces ``sigma_b`` on the output scale.
    """
    marginals = list(marginals)
    R = len(marginals)
    sigma_b = np.atleast_2d(np.asarray(sigma_b, dtype=float))
    if sigma_b.shape != (R, R):
        raise ConfigError(f"correlation matrix has shape {sigma_b.shape}, expected {(R, R)}")
    if not np.allclose(np.diag(sigma_b), 1.0) or not np.allclose(sigma_b, sigma_b.T):
        raise NotPositiveDefiniteError("correlation matrix must be symmetric with unit diagonal")
    try:
        np.linalg.cholesky(sigma_b)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("correlation matrix is not positive definite") from None
    corr = match_copula_correlation(marginals, sigma_b) if match and R > 1 else sigma_b
    return _copula_draw(marginals, corr, int(n), _rng(seed))


# ---------------------------------------------------------------------------
# hypothesis grids
# ---------------------------------------------------------------------------


def hypothesis_grid(distribution: str, target: str = "regression") -> np.ndarray:
    """The 20 null-hypothesis vectors (rows) for a distribution and parameter type."""
    if target == "dispersion":
        if distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {distribution!r}")
        return np.array(_GRID_DISPERSION, dtype=float)
    if target != "regression":
        raise ConfigError(f"unknown hypothesis target {target!r}")
    grids = {"normal": _GRID_NORMAL, "poisson": _GRID_POISSON, "bernoulli": _GRID_BERNOULLI}
    if distribution not in grids:
        raise ConfigError(f"unknown distribution {distribution!r}")
    return np.array(grids[distribution], dtype=float)


def normalized_distances(grid, truth) -> np.ndarray:
    """Euclidean distance of each row from ``truth``, divided by the largest."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise DegenerateGridError("empty hypothesis grid")
    d = np.linalg.norm(grid - np.asarray(truth, dtype=float), axis=1)
    top = d.max()
    if top == 0:
        raise DegenerateGridError("every hypothesis equals the truth")
    return d / top


# ---------------------------------------------------------------------------
# power studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    scenario: str = "univariate"
    sample_sizes: tuple = (50, 100, 250, 500, 1000)
    replicates: int = 500
    distribution: str = "normal"
    target: str = "regression"
    alpha: float = 0.05
    seed: int = DEFAULT_SEED
    cluster_size: int = 5
    workers: int = 1
    match_correlation: bool = False
    max_failure_rate: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        if self.scenario not in ("univariate", "trivariate"):
            raise ConfigError(f"scenario must be univariate or trivariate, got {self.scenario!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown hypothesis target {self.target!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("significance level must lie in (0, 1)")
        if not self.sample_sizes:
            raise ConfigError("need at least one sample size")
        if self.cluster_size < 1:
            raise ConfigError("cluster size must be at least 1")
        if min(self.sample_sizes) < 2:
            raise ConfigError("sample sizes must be at least 2")

    @property
    def n_responses(self) -> int:
        return 1 if self.scenario == "univariate" else 3

    def n_rows(self, n: int) -> int:
        """Data rows for sample size ``n`` (dispersion studies: n units of ``cluster_size`` rows)."""
        return n * self.cluster_size if self.target == "dispersion" else n


@dataclass(frozen=True, eq=False)
class PowerCurve:
    scenario: str
    distribution: str
    target: str
    n: int
    distance: np.ndarray
    rejection_rate: np.ndarray
    mc_se: np.ndarray
    failures: int
    replicates: int

    @property
    def hypothesis_index(self) -> np.ndarray:
        return np.arange(1, self.distance.size + 1)


_FAMILIES = {
    "normal": ("identity", VarianceFunction("power", 0.0)),
    "poisson": ("log", VarianceFunction("power", 1.0)),
    "bernoulli": ("logit", VarianceFunction("binomial", 1.0)),
}


def study_marginal(config: StudyConfig) -> MarginalSpec:
    truth = TRUTH[(config.distribution, "regression")][0]
    if config.target == "regression":
        return {"normal": MarginalSpec.normal(truth, 1.0),
                "poisson": MarginalSpec.poisson(float(np.exp(truth))),
                "bernoulli": MarginalSpec.bernoulli(float(expit(truth)))}[config.distribution]
    return {"normal": MarginalSpec.normal(5.0, 1.0),
            "poisson": MarginalSpec.poisson(10.0),
            "bernoulli": MarginalSpec.bernoulli(0.6)}[config.distribution]


def study_model(config: StudyConfig, n: int) -> McglmModel:
    """Model fitted to each replicate of a study of sample size ``n``."""
    link, variance = _FAMILIES[config.distribution]
    units = n
    n = config.n_rows(n)
    R = config.n_responses
    if config.target == "regression":
        level = np.arange(n) % 4
        X = np.column_stack([np.ones(n)] + [(level == k).astype(float) for k in (1, 2, 3)])
        names = ("Intercept", "x[B]", "x[C]", "x[D]")
        mp = MatrixPredictor.identity(n)
    else:
        X = np.ones((n, 1))
        names = ("Intercept",)
        block = sp.kron(sp.identity(units), np.ones((config.cluster_size, config.cluster_size)), format="csr")
        mp = MatrixPredictor([sp.identity(n, format="csr"), block])
    responses = tuple(ResponseSpec(X, link, variance, True, f"y{r + 1}", names) for r in range(R))
    return McglmModel(responses, (mp,) * R, correlated=R > 1)


def study_hypotheses(config: StudyConfig, fit_result):
    """Wald hypotheses for the 20 grid rows, over all responses jointly."""
    grid = hypothesis_grid(config.distribution, config.target)
    kind = "beta" if config.target == "regression" else "tau"
    h = grid.shape[1]
    R = config.n_responses
    return [kronecker_hypothesis(fit_result, np.eye(h), kind=kind, c=np.tile(row, R)) for row in grid]


def replicate_seed(base: int, n: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base), int(n), int(k)])


def run_replicate(config: StudyConfig, n: int, k: int):
    """Rejection indicators (20,) for one replicate, or None if the fit failed."""
    rng = np.random.default_rng(replicate_seed(config.seed, n, k))
    R = config.n_responses
    marg = [study_marginal(config)] * R
    corr = TRIVARIATE_CORRELATION if R == 3 else np.eye(1)
    Y = norta_sample(marg, corr, config.n_rows(n), rng, match=config.match_correlation)
    model = study_model(config, n)
    try:
        res = fit(model, Y, FitOptions())
        if not res.converged:
            return None
        pvals = [wald_test(res, hyp).p_value for hyp in study_hypotheses(config, res)]
    except (McglmError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.debug("replicate n=%d k=%d failed: %s", n, k, exc)
        return None
    return np.asarray(pvals) < config.alpha


def _chunk_runner(args):
    config, n, ks = args
    return [run_replicate(config, n, k) for k in ks]


def run_power_study(config: StudyConfig) -> list[PowerCurve]:
    """Rejection rate per grid hypothesis for every configured sample size."""
    grid = hypothesis_grid(config.distribution, config.target)
    dist = normalized_distances(grid, TRUTH[(config.distribution, config.target)])
    curves = []
    for n in config.sample_sizes:
        if config.workers > 1:
            chunks = np.array_split(np.arange(config.replicates), config.workers)
            with ProcessPoolExecutor(config.workers) as pool:
                parts = pool.map(_chunk_runner, [(config, n, list(c)) for c in chunks])
                results = [r for part in parts for r in part]
        else:
            results = [run_replicate(config, n, k) for k in range(config.replicates)]
        ok = [r for r in results if r is not None]
        failures = len(results) - len(ok)
        if failures > config.max_failure_rate * config.replicates:
            raise NumericalError(f"{failures} of {config.replicates} replicate fits failed at n={n}")
        if not ok:
            raise NumericalError(f"no replicate succeeded at n={n}")
        rate = np.mean(np.array(ok, dtype=float), axis=0)
        se = np.sqrt(rate * (1.0 - rate) / len(ok))
        curves.append(PowerCurve(config.scenario, config.distribution, config.target, n,
                                 dist, rate, se, failures, config.replicates))
        logger.info("n=%d: truth-row rejection %.3f (%d failures)", n, rate[0], failures)
    return curves


CSV_COLUMNS = ("scenario", "distribution", "n", "hypothesis_index", "distance",
               "rejection_rate", "mc_se", "failures")


def power_curves_to_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in curves:
        for i, d, rate, se in zip(c.hypothesis_index, c.distance, c.rejection_rate, c.mc_se):
            w.writerow([c.scenario, c.distribution, c.n, int(i), repr(float(d)),
                        repr(float(rate)), repr(float(se)), c.failures])
    return buf.getvalue()
