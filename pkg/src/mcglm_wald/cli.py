"""Command-line front end.

Every subcommand reads a CSV data file and a JSON model configuration, prints
a fixed-width table to standard output and, with ``--out PREFIX``, writes
machine-readable ``PREFIX.csv`` / ``PREFIX.json`` sidecars at full precision.

Model configuration example::

    {
      "responses": [
        {"column": "yfas", "link": "identity", "variance": "power", "power": 0},
        {"column": "bmi", "link": "log", "variance": "poisson_tweedie", "power": 1,
         "power_fixed": false}
      ],
      "formula": "treatment*time",
      "factors": {"treatment": ["placebo", "topiramate"], "time": ["T0", "T1", "T2"]},
      "group_column": "id",
      "correlated": true,
      "options": {"tol": 1e-6, "max_iter": 100}
    }

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp

from . import anova as anova_mod
from . import multcomp as mc
from . import simulate as sim
from .design import build_design, parse_formula
from .errors import (ConfigError, ConvergenceError, DataError, DegenerateGridError, DomainError,
                     IncompatiblePredictorsError, McglmError, NumericalError, SelectionError, ShapeError,
                     TermError)
from .estimation import FitOptions, fit
from .model_core import MatrixPredictor, McglmModel, ResponseSpec, VarianceFunction
from .tables import format_p
from .wald import Hypothesis, wald_test

logger = logging.getLogger(__name__)

DEFAULT_SEED = sim.DEFAULT_SEED

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_NONCONVERGENCE = 5

_CONFIG_ERRORS = (ConfigError, TermError, SelectionError, IncompatiblePredictorsError, DegenerateGridError)
_DATA_ERRORS = (DataError, ShapeError, DomainError)


# ---------------------------------------------------------------------------
# configuration and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResponseConfig:
    column: str
    link: str = "identity"
    variance: str = "power"
    power: float | tuple = 0.0
    power_fixed: bool = True
    formula: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    responses: tuple
    formula: str = "1"
    factors: dict | None = None
    group_column: str | None = None
    correlated: bool = True
    intercept: bool = True
    options: dict | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        if not isinstance(raw, dict):
            raise ConfigError("model configuration must be a JSON object")
        known = {"responses", "formula", "factors", "group_column", "correlated", "intercept", "options"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        items = raw.get("responses")
        if not items:
            raise ConfigError("configuration needs a non-empty 'responses' list")
        responses = []
        for item in items:
            if isinstance(item, str):
                item = {"column": item}
            try:
                rc = ResponseConfig(**item)
            except TypeError as exc:
                raise ConfigError(f"bad response entry {item!r}: {exc}") from None
            if isinstance(rc.power, list):
                rc = ResponseConfig(**{**item, "power": tuple(rc.power)})
            responses.append(rc)
        factors = raw.get("factors")
        if factors is not None and not isinstance(factors, dict):
            raise ConfigError("'factors' must map column names to level lists")
        return cls(tuple(responses), raw.get("formula", "1"), factors, raw.get("group_column"),
                   bool(raw.get("correlated", True)), bool(raw.get("intercept", True)),
                   raw.get("options") or {})

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(_read_json(path))

    def formula_for(self, rc: ResponseConfig) -> str:
        return rc.formula if rc.formula is not None else self.formula

    def columns(self) -> list[str]:
        """Every data column the model references."""
        cols = [rc.column for rc in self.responses]
        for rc in self.responses:
            for term in parse_formula(self.formula_for(rc)):
                cols.extend(term)
        if self.group_column:
            cols.append(self.group_column)
        return list(dict.fromkeys(cols))

    def fit_options(self) -> FitOptions:
        try:
            return FitOptions(**self.options)
        except TypeError as exc:
            raise ConfigError(f"bad fit options: {exc}") from None


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


@dataclass(frozen=True, eq=False)
class Dataset:
    frame: pd.DataFrame
    dropped: int
    source_lines: np.ndarray  # 1-based file line of every retained row


def ingest_csv(path, config: ModelConfig) -> Dataset:
    """Read a CSV file, mark ``""``/``"NA"`` as missing and drop incomplete model rows."""
    try:
        frame = pd.read_csv(path, na_values=["", "NA"], keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError(f"cannot read {path}: no such file") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty (a header row is required)") from None
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: parse error: {exc}".strip()) from None
    lines = np.arange(len(frame)) + 2
    missing = [c for c in config.columns() if c not in frame.columns]
    if missing:
        raise ConfigError(f"columns {missing} not found in {path}; available: {list(frame.columns)}")
    for rc in config.responses:
        col = frame[rc.column]
        if not pd.api.types.is_numeric_dtype(col):
            num = pd.to_numeric(col, errors="coerce")
            bad = np.flatnonzero(num.isna() & col.notna())
            raise DataError(f"{path}: line {lines[bad[0]]}: non-numeric value {col.iloc[bad[0]]!r} "
                            f"in response column {rc.column!r}")
    used = config.columns()
    keep = frame[used].notna().all(axis=1).to_numpy()
    dropped = int((~keep).sum())
    if dropped:
        logger.info("dropped %d of %d rows with missing model values", dropped, len(frame))
    frame = frame.loc[keep].reset_index(drop=True)
    if frame.empty:
        raise DataError(f"{path}: no complete rows remain")
    return Dataset(frame, dropped, lines[keep])


def build_group_block_z(dataset, column) -> sp.csr_matrix:
    """``Z[i, j] = 1`` when rows i and j share the value of ``column``."""
    frame = dataset.frame if isinstance(dataset, Dataset) else dataset
    if column not in frame.columns:
        raise ConfigError(f"grouping column {column!r} not found")
    codes, _ = pd.factorize(frame[column], use_na_sentinel=True)
    if np.any(codes < 0):
        raise DataError(f"grouping column {column!r} has missing values")
    ind = sp.csr_matrix((np.ones(codes.size), (np.arange(codes.size), codes)))
    return (ind @ ind.T).tocsr()


def _variance(rc: ResponseConfig) -> VarianceFunction:
    power = rc.power
    if isinstance(power, (list, tuple)):
        power = tuple(float(p) for p in power)
    else:
        power = float(power)
    try:
        return VarianceFunction(rc.variance, power)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"response {rc.column!r}: {exc}") from None


def build_model(config: ModelConfig, dataset: Dataset) -> tuple[McglmModel, np.ndarray]:
    """Model and response matrix for the retained rows."""
    frame = dataset.frame
    n = len(frame)
    comps = [sp.identity(n, format="csr")]
    if config.group_column:
        comps.append(build_group_block_z(dataset, config.group_column))
    mp = MatrixPredictor(comps)
    specs = []
    for rc in config.responses:
        design = build_design(frame, config.formula_for(rc), config.factors, config.intercept)
        specs.append(ResponseSpec(design.X, rc.link, _variance(rc), bool(rc.power_fixed), rc.column,
                                  design.column_names, design))
    Y = frame[[rc.column for rc in config.responses]].to_numpy(dtype=float)
    return McglmModel(tuple(specs), (mp,), correlated=config.correlated), Y


def _load_and_fit(args):
    config = ModelConfig.load(args.config)
    data = ingest_csv(args.data, config)
    model, Y = build_model(config, data)
    res = fit(model, Y, config.fit_options())
    if not res.converged:
        logger.warning("fit did not converge; results are unreliable")
    return config, data, res


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _format_rows(head, body):
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "\n".join([fmt.format(*head), "  ".join("-" * w for w in widths)] + [fmt.format(*b) for b in body])


def _write_records(prefix, records, extra=None):
    if not prefix:
        return
    pd.DataFrame.from_records(records).to_csv(f"{prefix}.csv", index=False, float_format="%.17g")
    doc = {"rows": records}
    if extra:
        doc.update(extra)
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, default=float)


def _convergence_exit(res):
    return EXIT_OK if res.converged else EXIT_NONCONVERGENCE


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    config, data, res = _load_and_fit(args)
    rows = res.coef_table(args.level)
    pct = f"{100 * args.level:g}%"
    head = ["Parameter", "Estimate", "Std. error", f"Lower {pct}", f"Upper {pct}", "p-value"]
    body = [[r["parameter"], f"{r['estimate']:.4f}", f"{r['std_error']:.4f}", f"{r['lower']:.4f}",
             f"{r['upper']:.4f}", format_p(r["p_value"])] for r in rows]
    print(f"McGLM fit: {res.model.n_obs} observations ({data.dropped} dropped), "
          f"{'converged' if res.converged else 'NOT converged'} after {res.iterations} iterations")
    print(_format_rows(head, body))
    _write_records(args.out, rows, {"converged": res.converged, "iterations": res.iterations,
                                    "dropped_rows": data.dropped})
    if args.residuals:
        resid = pd.DataFrame({"line": data.source_lines})
        for r, spec in enumerate(res.model.responses):
            resid[f"{spec.name}_fitted"] = res.fitted[:, r]
            resid[f"{spec.name}_pearson"] = res.pearson_residuals[:, r]
        resid.to_csv(args.residuals, index=False, float_format="%.17g")
    return _convergence_exit(res)


def _hypothesis_from_file(res, path) -> Hypothesis:
    """Hypothesis file: ``{"parameters": [labels], "L": [[...]], "c": [...]}``.

    ``parameters`` names the columns of ``L`` (default: every non-correlation
    parameter in theta order).  Alternatively ``"equal_zero": [labels]`` tests
    each named parameter against zero jointly.
    """
    raw = _read_json(path)
    pmap = res.parameter_map
    try:
        if "equal_zero" in raw:
            labels = list(raw["equal_zero"])
            scope = [pmap.index_of(lab) for lab in labels]
            return Hypothesis(np.eye(len(scope)), raw.get("c"), scope=scope, labels=tuple(labels))
        if "parameters" in raw:
            scope = [pmap.index_of(lab) for lab in raw["parameters"]]
        else:
            scope = None
        return Hypothesis(np.asarray(raw["L"], dtype=float), raw.get("c"), scope=scope)
    except KeyError as exc:
        raise ConfigError(f"{path}: missing or unknown entry {exc}") from None
    except ValueError as exc:
        if isinstance(exc, McglmError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


def cmd_wald(args) -> int:
    _, _, res = _load_and_fit(args)
    hyp = _hypothesis_from_file(res, args.hypothesis)
    out = wald_test(res, hyp)
    rec = {"statistic": out.statistic, "df": out.df, "p_value": out.p_value}
    print(_format_rows(["Wald", "Df", "p-value"],
                       [[f"{out.statistic:.4f}", str(out.df), format_p(out.p_value)]]))
    _write_records(args.out, [rec])
    return _convergence_exit(res)


def _emit_table(table, args):
    print(table.format())
    if args.out:
        with open(f"{args.out}.csv", "w", encoding="utf-8") as fh:
            fh.write(table.to_csv())
        with open(f"{args.out}.json", "w", encoding="utf-8") as fh:
            json.dump({"kind": table.kind, "type": table.type, "rows": table.records()}, fh, indent=2)


def cmd_anova(args) -> int:
    _, _, res = _load_and_fit(args)
    if args.dispersion:
        table = anova_mod.dispersion_anova(res, "III", scope=args.response or 0)
    else:
        table = anova_mod.anova_table(res, response=args.response or 0, type=args.type)
    _emit_table(table, args)
    return _convergence_exit(res)


def cmd_manova(args) -> int:
    _, _, res = _load_and_fit(args)
    if args.dispersion:
        table = anova_mod.dispersion_anova(res, "III", scope="joint")
    else:
        table = anova_mod.manova_table(res, type=args.type)
    _emit_table(table, args)
    return _convergence_exit(res)


def cmd_multcomp(args) -> int:
    _, _, res = _load_and_fit(args)
    response = args.response if args.response is not None else 0
    k0 = mc.build_k0(res, args.effect, response=response, others=args.others)
    k1 = mc.build_k1(k0)
    scope = args.response if args.response is not None else "joint"
    table = mc.pairwise_tests(res, k1, select=args.select, scope=scope)
    _emit_table(table, args)
    return _convergence_exit(res)


def load_study(path, seed) -> sim.StudyConfig:
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("study configuration must be a JSON object")
    raw = dict(raw)
    raw["seed"] = seed
    try:
        return sim.StudyConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad study configuration: {exc}") from None


def cmd_simulate(args) -> int:
    study = load_study(args.study, args.seed)
    if args.workers is not None:
        study = sim.StudyConfig(**{**study.__dict__, "workers": args.workers})
    curves = sim.run_power_study(study)
    head = ["n", "H", "Distance", "Rejection", "MC s.e.", "Failures"]
    body = [[str(c.n), str(i), f"{d:.4f}", f"{r:.4f}", f"{s:.4f}", str(c.failures)]
            for c in curves for i, d, r, s in zip(c.hypothesis_index, c.distance, c.rejection_rate, c.mc_se)]
    print(f"Power study: {study.scenario} {study.distribution} {study.target}, "
          f"{study.replicates} replicates, seed {study.seed}")
    print(_format_rows(head, body))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(sim.power_curves_to_csv(curves))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _model_args(p):
    p.add_argument("--config", required=True, help="JSON model configuration")
    p.add_argument("--data", required=True, help="CSV data file with a header row")
    p.add_argument("--out", help="prefix for the CSV/JSON sidecar files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcglm-wald", description=__doc__.split("\n\n")[0])
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED,
                        help=f"seed for every random draw (default {DEFAULT_SEED})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and print the coefficient table")
    _model_args(p)
    p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p.add_argument("--residuals", help="write fitted values and Pearson residuals to this CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("wald", help="Wald test of a general linear hypothesis")
    _model_args(p)
    p.add_argument("--hypothesis", required=True, help="JSON file with L, c and parameter labels")
    p.set_defaults(func=cmd_wald)

    for name, func, helptext in (("anova", cmd_anova, "per-response ANOVA table"),
                                 ("manova", cmd_manova, "joint MANOVA table")):
        p = sub.add_parser(name, help=helptext)
        _model_args(p)
        p.add_argument("--type", choices=["1", "2", "3", "I", "II", "III"], default="2")
        p.add_argument("--dispersion", action="store_true", help="test the dispersion parameters instead")
        if name == "anova":
            p.add_argument("--response", help="response column (default: the first)")
        p.set_defaults(func=func)

    p = sub.add_parser("multcomp", help="pairwise comparisons of factor levels")
    _model_args(p)
    p.add_argument("--effect", action="append", required=True,
                   help="factor whose levels are compared (repeat for crossed factors)")
    p.add_argument("--select", action="append", help="contrast label or glob pattern (repeatable)")
    p.add_argument("--response", help="compare within one response instead of jointly")
    p.add_argument("--others", choices=["average", "reference"], default="average",
                   help="how other variables are held (default: average)")
    p.set_defaults(func=cmd_multcomp)

    p = sub.add_parser("simulate", help="Monte Carlo power study")
    p.add_argument("--study", required=True, help="JSON study configuration")
    p.add_argument("--out", help="write the power curves to this CSV")
    p.add_argument("--workers", type=int, help="worker processes for replicates")
    p.set_defaults(func=cmd_simulate)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConvergenceError):
        return EXIT_NONCONVERGENCE
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_CONFIG


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    np.random.seed(args.seed % 2**32)
    try:
        return args.func(args)
    except McglmError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (ValueError, KeyError) as exc:
        print(f"error: config_error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
