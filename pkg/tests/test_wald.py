import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcglm_wald.errors import DomainError, IncompatiblePredictorsError, NonTestableHypothesisError, ShapeError
from mcglm_wald.estimation import fit
from mcglm_wald.model_core import MatrixPredictor, McglmModel, ResponseSpec, VarianceFunction
from mcglm_wald.wald import (Hypothesis, build_L_equality, build_L_kronecker, build_L_single, build_L_subset,
                             chi2_sf, embed_columns, kronecker_hypothesis, wald_test)

from conftest import gaussian_model
from oracles import chi2_sf_oracle, upper_gamma_q


class TestChi2:
    def test_zero_statistic(self):
        for df in (1, 2, 7):
            assert chi2_sf(0.0, df) == 1.0

    def test_critical_value(self):
        assert chi2_sf(3.841459, 1) == pytest.approx(0.05, abs=1e-5)

    def test_df_two(self):
        assert chi2_sf(13.2767, 2) == pytest.approx(0.0013, abs=1e-5)

    def test_oracle_cross_check(self):
        for a, x in [(0.5, 0.1), (0.5, 3.0), (1, 1), (2.5, 0.7), (4, 10), (6, 2), (10, 30), (3.5, 3.5)]:
            assert float(upper_gamma_q(a, x)) == pytest.approx(float(mp.gammainc(a, x, regularized=True)),
                                                               rel=1e-30)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 80), st.integers(1, 30))
    def test_property_against_oracle(self, w, df):
        assert abs(chi2_sf(w, df) - chi2_sf_oracle(w, df)) < 1e-12

    def test_monotone_decreasing(self):
        w = np.linspace(0, 40, 200)
        assert np.all(np.diff(chi2_sf(w, 3)) <= 0)

    @pytest.mark.parametrize("df", [0, -1, 1.5])
    def test_bad_df(self, df):
        with pytest.raises(DomainError):
            chi2_sf(1.0, df)

    def test_negative_statistic(self):
        with pytest.raises(DomainError):
            chi2_sf(-1.0, 1)


class TestBuilders:
    def test_single(self):
        np.testing.assert_array_equal(build_L_single(6, 1).L, [[0, 1, 0, 0, 0, 0]])

    def test_subset(self):
        h = build_L_subset(6, [1, 3])
        np.testing.assert_array_equal(h.L, [[0, 1, 0, 0, 0, 0], [0, 0, 0, 1, 0, 0]])
        np.testing.assert_array_equal(h.c, [0, 0])

    def test_equality(self):
        np.testing.assert_array_equal(build_L_equality(6, 1, 3).L, [[0, 1, 0, -1, 0, 0]])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            build_L_single(3, 3)

    def test_kronecker_displayed(self):
        np.testing.assert_array_equal(build_L_kronecker(np.eye(2), [[0, 1]]), [[0, 1, 0, 0], [0, 0, 0, 1]])

    def test_kronecker_single_response(self):
        F = np.array([[1.0, 2.0, 0.0]])
        np.testing.assert_array_equal(build_L_kronecker(np.eye(1), F), F)

    def test_redundant_rows_rejected(self):
        with pytest.raises(NonTestableHypothesisError):
            Hypothesis([[1.0, 0.0], [2.0, 0.0]])

    def test_c_length(self):
        with pytest.raises(ShapeError):
            Hypothesis([[1.0, 0.0]], [0.0, 1.0])


class TestWaldTest:
    def test_single_parameter_is_squared_z(self, bivariate_fit):
        res = bivariate_fit
        scope = res.parameter_map.scope
        for pos, idx in enumerate(scope):
            out = wald_test(res, build_L_single(len(scope), pos))
            z = res.theta[idx] / res.std_errors[idx]
            assert out.statistic == pytest.approx(z * z, rel=1e-10)
            assert out.df == 1

    def test_null_at_estimate(self, bivariate_fit):
        theta = bivariate_fit.theta_star
        L = np.eye(theta.size)[:3]
        out = wald_test(bivariate_fit, Hypothesis(L, L @ theta))
        assert out.statistic == 0.0 and out.p_value == 1.0

    def test_row_scaling_invariance(self, bivariate_fit, rng):
        h = bivariate_fit.theta_star.size
        L = rng.normal(size=(3, h))
        c = rng.normal(size=3)
        M = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        w1 = wald_test(bivariate_fit, Hypothesis(L, c)).statistic
        w2 = wald_test(bivariate_fit, Hypothesis(M @ L, M @ c)).statistic
        assert w2 == pytest.approx(w1, rel=1e-10)

    def test_equality_on_duplicated_response(self, rng):
        n = 100
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ [1.0, 2.0] + rng.normal(size=n)
        # second response: same fitted coefficients, different residuals (noise orthogonal to X)
        noise = rng.normal(size=n)
        Y = np.column_stack([y, y + 0.5 * (noise - X @ np.linalg.lstsq(X, noise, rcond=None)[0])])
        res = fit(gaussian_model(X, 2), Y)
        assert res.beta[1] == pytest.approx(res.beta[3], abs=1e-8)
        out = wald_test(res, build_L_equality(res.theta_star.size, 1, 3))
        assert out.statistic < 1e-8

    def test_kronecker_equals_hand_stacked(self, bivariate_fit):
        F = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        w_kron = wald_test(bivariate_fit, kronecker_hypothesis(bivariate_fit, F)).statistic
        h = bivariate_fit.theta_star.size
        L = np.zeros((4, h))
        L[0, 1] = L[1, 2] = L[2, 4] = L[3, 5] = 1.0
        assert wald_test(bivariate_fit, Hypothesis(L)).statistic == pytest.approx(w_kron, rel=1e-12)

    def test_orthogonal_nesting(self, bivariate_fit):
        # eigenvectors of J* give rows orthogonal in the J* metric
        _, vecs = np.linalg.eigh(bivariate_fit.vcov_star)
        L2 = vecs[:, :3].T
        w1 = wald_test(bivariate_fit, Hypothesis(L2[:2])).statistic
        w2 = wald_test(bivariate_fit, Hypothesis(L2)).statistic
        assert w2 >= w1 - 1e-10

    def test_rho_scope_rejected(self, bivariate_fit):
        rho = bivariate_fit.parameter_map.indices("rho")
        with pytest.raises(ShapeError):
            wald_test(bivariate_fit, Hypothesis([[1.0]], scope=rho))

    def test_column_mismatch(self, bivariate_fit):
        with pytest.raises(ShapeError):
            wald_test(bivariate_fit, Hypothesis([[1.0, 0.0]]))

    def test_embed_columns_per_response(self, bivariate_fit):
        L = embed_columns(bivariate_fit, "beta", [[0.0, 1.0, 0.0]], response=1)
        assert np.flatnonzero(L[0]).tolist() == [4]

    def test_incompatible_predictors(self, rng):
        n = 40
        X1 = np.column_stack([np.ones(n), rng.normal(size=n)])
        X2 = np.ones((n, 1))
        gauss = dict(link="identity", variance=VarianceFunction("power", 0.0))
        m = McglmModel((ResponseSpec(X1, name="a", **gauss), ResponseSpec(X2, name="b", **gauss)),
                       (MatrixPredictor.identity(n),))
        res = fit(m, rng.normal(size=(n, 2)))
        with pytest.raises(IncompatiblePredictorsError):
            kronecker_hypothesis(res, [[1.0, 0.0]])

    def test_large_sample_matches_f_test(self):
        from scipy import stats

        rng = np.random.default_rng(2024)
        n = 2000
        X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
        y = 1.0 + rng.normal(size=n)
        res = fit(gaussian_model(X), y)
        out = wald_test(res, build_L_subset(res.theta_star.size, [1, 2, 3]))
        b = np.linalg.lstsq(X, y, rcond=None)[0]
        rss1 = np.sum((y - X @ b) ** 2)
        rss0 = np.sum((y - y.mean()) ** 2)
        F = ((rss0 - rss1) / 3) / (rss1 / (n - 4))
        assert abs(out.p_value - stats.f.sf(F, 3, n - 4)) < 0.01
