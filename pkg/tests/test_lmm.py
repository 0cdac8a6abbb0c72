import math

import numpy as np
import pytest
from scipy import linalg

from maihda import (
    CohortDataset,
    FactorSpec,
    FitError,
    VarianceComponents,
    build_strata,
    eb_predict,
    fit,
    gls_fixed_effects,
    intercept_design,
    ols_fit,
    summarize_strata,
)
from maihda.lmm import profiled_deviance
from maihda.transform import main_effects_for_codes


def one_factor_dataset(values_by_stratum):
    """Each inner sequence becomes one stratum of a single-factor cohort."""
    J = len(values_by_stratum)
    factor = FactorSpec("g", tuple(f"c{i}" for i in range(max(J, 2))))
    codes = np.concatenate(
        [np.full(len(v), j, dtype=np.int64) for j, v in enumerate(values_by_stratum)]
    )[:, None]
    y = np.concatenate([np.asarray(v, dtype=float) for v in values_by_stratum])
    ds = CohortDataset("t", [factor], codes, y)
    idx = build_strata(ds)
    return ds, idx, summarize_strata(ds, idx, suppression_threshold=1)


def random_grouped(rng, J=None, sigma2_u=None, sigma2_e=None, max_n=60):
    J = J or int(rng.integers(15, 50))
    sigma2_u = sigma2_u if sigma2_u is not None else float(rng.uniform(0.05, 1.5))
    sigma2_e = sigma2_e if sigma2_e is not None else float(rng.uniform(0.2, 2.0))
    sizes = rng.integers(3, max_n, size=J)
    u = rng.normal(0, math.sqrt(sigma2_u), J)
    groups = [
        u[j] + rng.normal(0, math.sqrt(sigma2_e), sizes[j]) for j in range(J)
    ]
    return one_factor_dataset(groups)


BALANCED = [(0.0, 2.0), (1.0, 3.0), (5.0, 7.0)]


class TestBalancedOracle:
    """Balanced one-way layouts have closed-form REML and ML estimates."""

    def test_fixture_reml_equals_2_6_3(self):
        _, _, summ = one_factor_dataset(BALANCED)
        res = fit(summ, intercept_design(3), method="reml")
        assert res.converged
        assert res.vc.sigma2_e == pytest.approx(2.0, rel=1e-6)
        assert res.vc.sigma2_u == pytest.approx(6.0, rel=1e-6)
        assert res.fixed.estimates[0] == pytest.approx(3.0, abs=1e-9)

    def test_fixture_ml_closed_form(self):
        # ML: sigma2_e = MSW, d = n * SSB_means / J, so sigma2_u = 11/3
        _, _, summ = one_factor_dataset(BALANCED)
        res = fit(summ, intercept_design(3), method="ml")
        assert res.vc.sigma2_e == pytest.approx(2.0, rel=1e-6)
        assert res.vc.sigma2_u == pytest.approx(11.0 / 3.0, rel=1e-6)
        assert res.fixed.estimates[0] == pytest.approx(3.0, abs=1e-9)

    def test_random_balanced_matches_anova(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            J, n = int(rng.integers(4, 12)), int(rng.integers(3, 15))
            groups = rng.normal(0, 1.0, (J, 1)) * 1.3 + rng.normal(0, 0.8, (J, n))
            _, _, summ = one_factor_dataset(list(groups))
            means = groups.mean(axis=1)
            msw = groups.var(axis=1, ddof=1).mean()
            msb = n * means.var(ddof=1)
            expect_u = (msb - msw) / n
            if expect_u <= 0:
                continue
            res = fit(summ, intercept_design(J), method="reml")
            assert res.vc.sigma2_e == pytest.approx(msw, rel=1e-6)
            assert res.vc.sigma2_u == pytest.approx(expect_u, rel=1e-6)


class TestDevianceOracle:
    """The O(J) sufficient-statistic deviance equals the dense-matrix one."""

    @pytest.mark.parametrize("method", ["reml", "ml"])
    def test_matches_dense_route(self, method):
        rng = np.random.default_rng(5)
        factors = [FactorSpec("a", ("x", "y")), FactorSpec("b", ("p", "q", "r"))]
        codes = np.repeat(
            np.array([[i, j] for i in range(2) for j in range(3)]),
            rng.integers(3, 9, 6),
            axis=0,
        )
        y = rng.normal(0, 1, codes.shape[0]) + 0.5 * codes[:, 0]
        ds = CohortDataset("t", factors, codes, y)
        idx = build_strata(ds)
        summ = summarize_strata(ds, idx, 1)
        design = main_effects_for_codes(idx.combos, factors)
        Xu = design.values[idx.row_stratum - 1]
        N, p = Xu.shape
        for su, se in [(0.3, 0.9), (0.01, 1.5), (2.0, 0.4)]:
            V = se * np.eye(N)
            for j in range(1, idx.n_strata + 1):
                m = idx.row_stratum == j
                V[np.ix_(m, m)] += su
            Vi = linalg.inv(V)
            M = Xu.T @ Vi @ Xu
            beta = linalg.solve(M, Xu.T @ Vi @ y)
            r = y - Xu @ beta
            dense = np.linalg.slogdet(V)[1] + r @ Vi @ r
            if method == "reml":
                dense += (N - p) * math.log(2 * math.pi) + np.linalg.slogdet(M)[1]
            else:
                dense += N * math.log(2 * math.pi)
            fast = profiled_deviance(summ, design, VarianceComponents(su, se), method)
            assert fast == pytest.approx(dense, abs=1e-8)


class TestFitQuality:
    def test_gradient_vanishes_at_optimum(self):
        rng = np.random.default_rng(99)
        for _ in range(6):
            _, _, summ = random_grouped(rng)
            design = intercept_design(len(summ))
            res = fit(summ, design, method="reml")
            if res.at_boundary:
                continue
            th = 0.5 * np.log([res.vc.sigma2_u, res.vc.sigma2_e])
            h = 1e-6
            for k in range(2):
                d = np.zeros(2)
                d[k] = h

                def dev(t):
                    vc = VarianceComponents(math.exp(2 * t[0]), math.exp(2 * t[1]))
                    return profiled_deviance(summ, design, vc, "reml")

                g = (dev(th + d) - dev(th - d)) / (2 * h)
                assert abs(g) < 1e-4 * (1 + abs(res.deviance))

    def test_fitted_deviance_beats_neighbours(self):
        rng = np.random.default_rng(7)
        _, _, summ = random_grouped(rng, J=30)
        design = intercept_design(30)
        for method in ("reml", "ml"):
            res = fit(summ, design, method=method)
            best = res.deviance
            for fu in (0.8, 1.25):
                for fe in (0.9, 1.1):
                    vc = VarianceComponents(
                        max(res.vc.sigma2_u * fu, 1e-12), res.vc.sigma2_e * fe
                    )
                    assert profiled_deviance(summ, design, vc, method) >= best - 1e-8

    def test_intercept_is_precision_weighted_mean(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            _, _, summ = random_grouped(rng)
            res = fit(summ, intercept_design(len(summ)))
            n = np.array([s.n for s in summ], float)
            ybar = np.array([s.mean_y for s in summ])
            w = n / (res.vc.sigma2_e + n * res.vc.sigma2_u)
            assert res.fixed.estimates[0] == pytest.approx(
                float(w @ ybar / w.sum()), abs=1e-10
            )

    def test_reml_and_ml_differ_on_unbalanced_data(self):
        rng = np.random.default_rng(13)
        _, _, summ = random_grouped(rng, J=12, max_n=25)
        res_r = fit(summ, intercept_design(12), method="reml")
        res_m = fit(summ, intercept_design(12), method="ml")
        assert res_r.vc.sigma2_u != pytest.approx(res_m.vc.sigma2_u, rel=1e-6)
        # ML shrinks the between-stratum component relative to REML
        assert res_m.vc.sigma2_u < res_r.vc.sigma2_u


class TestBoundary:
    def test_zero_between_variance_lands_on_boundary(self):
        rng = np.random.default_rng(1)
        groups = [rng.normal(0, 1, 50) for _ in range(6)]
        # remove all between-group signal
        groups = [g - g.mean() for g in groups]
        _, _, summ = one_factor_dataset(groups)
        res = fit(summ, intercept_design(6))
        assert res.at_boundary
        assert res.vc.sigma2_u == 0.0
        assert res.converged
        se_u, se_e = res.vc_standard_errors
        assert se_u is None
        assert se_e is not None and se_e > 0

    def test_boundary_sigma2_e_is_the_ols_estimate(self):
        groups = [[1.0, 2.0], [1.5, 1.5], [2.0, 1.0]]
        groups = [np.asarray(g) - np.mean(g) for g in groups]
        _, _, summ = one_factor_dataset(groups)
        res = fit(summ, intercept_design(3), method="reml")
        y = np.concatenate(groups)
        rss = float(((y - y.mean()) ** 2).sum())
        assert res.at_boundary
        assert res.vc.sigma2_e == pytest.approx(rss / (len(y) - 1), rel=1e-12)

    def test_boundary_predictions_are_zero(self):
        rng = np.random.default_rng(2)
        groups = [rng.normal(0, 1, 40) for _ in range(5)]
        groups = [g - g.mean() for g in groups]
        _, _, summ = one_factor_dataset(groups)
        res = fit(summ, intercept_design(5))
        effects = eb_predict(res, summ)
        assert all(e.u_hat == 0.0 for e in effects)


class TestErrors:
    def test_rank_deficient_design_names_columns(self):
        _, _, summ = one_factor_dataset(BALANCED)
        from maihda.transform import DesignMatrix

        values = np.ones((3, 2))
        design = DesignMatrix(names=["intercept", "copy"], values=values)
        with pytest.raises(FitError, match="copy|intercept"):
            fit(summ, design)

    def test_reml_needs_more_strata_than_columns(self):
        _, _, summ = one_factor_dataset([(1.0, 2.0)])
        with pytest.raises(FitError, match="J"):
            fit(summ, intercept_design(1), method="reml")

    def test_no_within_variation_rejected(self):
        _, _, summ = one_factor_dataset([[1.0], [2.0], [3.0]])
        with pytest.raises(FitError):
            fit(summ, intercept_design(3))

    def test_unknown_method_rejected(self):
        _, _, summ = one_factor_dataset(BALANCED)
        with pytest.raises(FitError, match="method"):
            fit(summ, intercept_design(3), method="mle")

    def test_misaligned_design_rejected(self):
        _, _, summ = one_factor_dataset(BALANCED)
        with pytest.raises(FitError):
            fit(summ, intercept_design(4))


class TestEmpiricalBayes:
    def test_two_stratum_fixture(self):
        # means 1 and 3, n = 2 each, vc = (1, 1):
        # beta0 = 2, lambda = 2/3, u = -+2/3, se = sqrt(1/3)
        _, _, summ = one_factor_dataset([(0.5, 1.5), (2.5, 3.5)])
        vc = VarianceComponents(1.0, 1.0)
        fx = gls_fixed_effects(summ, intercept_design(2), vc)
        assert fx.estimates[0] == pytest.approx(2.0, abs=1e-12)

        res = fit(summ, intercept_design(2), method="ml")
        # pin the components to the fixture values for the prediction check
        from dataclasses import replace

        res = replace(
            res, vc=vc, stratum_fitted=np.array([2.0, 2.0]), fixed=fx
        )
        effects = eb_predict(res, summ)
        assert effects[0].u_hat == pytest.approx(-2.0 / 3.0, abs=1e-12)
        assert effects[1].u_hat == pytest.approx(2.0 / 3.0, abs=1e-12)
        se = math.sqrt(1.0 / 3.0)
        assert effects[0].se_u == pytest.approx(se, abs=1e-12)
        assert effects[0].ci_low == pytest.approx(-2 / 3 - 1.96 * se, abs=1e-12)
        assert effects[0].ci_high == pytest.approx(-2 / 3 + 1.96 * se, abs=1e-12)
        assert effects[1].predicted_mean == pytest.approx(2 + 2 / 3, abs=1e-12)

    def test_shrinkage_identity_exact(self):
        rng = np.random.default_rng(17)
        _, _, summ = random_grouped(rng)
        res = fit(summ, intercept_design(len(summ)))
        effects = eb_predict(res, summ)
        s2u, s2e = res.vc.sigma2_u, res.vc.sigma2_e
        for e, s in zip(effects, summ):
            lam = s2u * s.n / (s2u * s.n + s2e)
            m = s.mean_y - res.stratum_fitted[s.stratum_id - 1]
            assert e.u_hat == lam * m
            assert e.shrinkage_factor == pytest.approx(lam, rel=1e-15)

    def test_shrinkage_grows_with_stratum_size(self):
        # same raw residual mean, increasing n: |u| must not decrease
        sizes = [2, 5, 20, 100]
        groups = [np.full(n, 1.0) + np.linspace(-1, 1, n) for n in sizes]
        groups = [g - g.mean() + 1.0 for g in groups]  # every mean exactly 1.0
        _, _, summ = one_factor_dataset(groups + [[-4.0, -4.5] * 40])
        res = fit(summ, intercept_design(5))
        effects = eb_predict(res, summ)
        mags = [abs(effects[j].u_hat) for j in range(4)]
        assert all(b >= a - 1e-12 for a, b in zip(mags, mags[1:]))
        lams = [effects[j].shrinkage_factor for j in range(4)]
        assert all(b > a for a, b in zip(lams, lams[1:]))


class TestVarianceComponentSEs:
    def test_monte_carlo_calibration(self):
        # reported SEs should track the sampling spread of the estimates
        rng = np.random.default_rng(23)
        J, n = 40, 25
        est_u, est_e, se_u, se_e = [], [], [], []
        for _ in range(150):
            groups = rng.normal(0, math.sqrt(0.5), (J, 1)) + rng.normal(
                0, 1.0, (J, n)
            )
            _, _, summ = one_factor_dataset(list(groups))
            res = fit(summ, intercept_design(J))
            if res.at_boundary:
                continue
            est_u.append(res.vc.sigma2_u)
            est_e.append(res.vc.sigma2_e)
            se_u.append(res.vc_standard_errors[0])
            se_e.append(res.vc_standard_errors[1])
        assert np.mean(se_u) == pytest.approx(np.std(est_u), rel=0.25)
        assert np.mean(se_e) == pytest.approx(np.std(est_e), rel=0.25)

    def test_large_cohort_se_magnitudes(self):
        # at J=144 with truth near (0.32, 0.766) the SEs land around
        # (0.04, 0.004), the scale expected for cohorts of this shape
        rng = np.random.default_rng(42)
        J = 144
        sizes = np.exp(rng.uniform(np.log(11), np.log(4000), J)).astype(int)
        u = rng.normal(0, math.sqrt(0.32), J)
        groups = [u[j] + rng.normal(0, math.sqrt(0.766), sizes[j]) for j in range(J)]
        _, _, summ = one_factor_dataset(groups)
        res = fit(summ, intercept_design(J))
        se_u, se_e = res.vc_standard_errors
        assert 0.02 < se_u < 0.06
        assert 0.002 < se_e < 0.006


class TestOls:
    def test_three_point_fixture(self):
        _, _, summ = one_factor_dataset([[0.0, 1.0, 2.0]])
        res = ols_fit(summ, intercept_design(1))
        assert res.estimates[0] == pytest.approx(1.0, abs=1e-14)
        assert res.residual_variance == pytest.approx(1.0, rel=1e-14)
        assert res.standard_errors[0] == pytest.approx(math.sqrt(1 / 3), rel=1e-12)
        assert res.residual_variance_se == pytest.approx(1.0, rel=1e-12)
        assert res.df_residual == 2

    def test_matches_lstsq_on_expanded_rows(self):
        rng = np.random.default_rng(31)
        factors = [FactorSpec("a", ("x", "y")), FactorSpec("b", ("p", "q", "r"))]
        codes = np.repeat(
            np.array([[i, j] for i in range(2) for j in range(3)]),
            rng.integers(4, 12, 6),
            axis=0,
        )
        y = rng.normal(0, 1, codes.shape[0]) + 0.7 * codes[:, 1]
        ds = CohortDataset("t", factors, codes, y)
        idx = build_strata(ds)
        summ = summarize_strata(ds, idx, 1)
        design = main_effects_for_codes(idx.combos, factors)
        res = ols_fit(summ, design)
        Xu = design.values[idx.row_stratum - 1]
        beta, _, _, _ = np.linalg.lstsq(Xu, y, rcond=None)
        np.testing.assert_allclose(res.estimates, beta, atol=1e-10)
        rss = float(((y - Xu @ beta) ** 2).sum())
        df = len(y) - Xu.shape[1]
        assert res.residual_variance == pytest.approx(rss / df, rel=1e-12)
        cov = rss / df * linalg.inv(Xu.T @ Xu)
        np.testing.assert_allclose(res.covariance, cov, atol=1e-10)

    def test_standardized_outcome_gives_zero_intercept(self):
        from maihda import standardize

        rng = np.random.default_rng(37)
        z = standardize(rng.normal(2.0, 3.0, 200))
        _, _, summ = one_factor_dataset(np.array_split(z, 8))
        res = ols_fit(summ, intercept_design(8))
        assert abs(res.estimates[0]) < 1e-10
        assert res.residual_variance == pytest.approx(1.0, rel=1e-2)
