"""Multivariate covariance generalized linear models with Wald-based inference."""

from .anova import anova_table, dispersion_anova, manova_table
from .design import Design, build_design
from .errors import McglmError
from .estimation import FitOptions, McglmFit, fit
from .model_core import LinkFunction, MatrixPredictor, McglmModel, ResponseSpec, VarianceFunction
from .multcomp import build_k0, build_k1, pairwise_tests
from .simulate import StudyConfig, run_power_study
from .tables import TestRow, TestTable
from .wald import Hypothesis, build_L_equality, build_L_kronecker, build_L_single, build_L_subset, chi2_sf, wald_test

__all__ = [
    "Design", "FitOptions", "Hypothesis", "LinkFunction", "MatrixPredictor", "McglmError", "McglmFit",
    "McglmModel", "ResponseSpec", "StudyConfig", "TestRow", "TestTable", "VarianceFunction",
    "anova_table", "build_L_equality", "build_L_kronecker", "build_L_single", "build_L_subset",
    "build_design", "build_k0", "build_k1", "chi2_sf", "dispersion_anova", "fit", "manova_table",
    "pairwise_tests", "run_power_study", "wald_test",
]
