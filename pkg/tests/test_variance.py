import json

import numpy as np
import pytest

from rfvar.config import BootstrapConfig
from rfvar.data_feed import Dataset
from rfvar.errors import CoverageError, EstimationError
from rfvar.forest import predict_many
from rfvar.oob import oob_predictions, oob_weight_matrix
from rfvar.variance import (
    VarianceReport,
    bootstrap_base,
    bootstrap_refit,
    estimate_all,
    fast_factor,
    oob_residuals,
    r_hat_B,
    r_infinity,
    refit_by_substitution,
    sigma2_rf,
)


@pytest.fixture
def weighted(small_forest, small_dataset):
    weights = oob_weight_matrix(small_forest, small_dataset)
    base = bootstrap_base(small_forest, small_dataset, oob_predictions(small_forest, small_dataset))
    return weights, base


class TestResiduals:
    def test_constant_response(self, make_dataset, fit_forest):
        ds = make_dataset(30, 2, seed=6)
        flat = Dataset(ds.features, np.full(30, 4.0))
        res = oob_residuals(flat, oob_predictions(fit_forest(flat, num_trees=60), flat))
        assert np.all(res.values == 0.0)
        assert sigma2_rf(res) == 0.0

    def test_shifted_response(self, small_forest, small_dataset):
        pred = oob_predictions(small_forest, small_dataset)
        shifted = Dataset(small_dataset.features, np.where(np.isfinite(pred), pred + 1.0, 0.0))
        res = oob_residuals(shifted, pred)
        np.testing.assert_allclose(res.values, 1.0, rtol=1e-12)

    def test_matches_weight_form(self, make_dataset, fit_forest):
        ds = make_dataset(6, 1, seed=2)
        forest = fit_forest(ds, num_trees=200, master_seed=4)
        weights = oob_weight_matrix(forest, ds)
        res = oob_residuals(ds, oob_predictions(forest, ds))
        expected = ds.response - weights.dense() @ ds.response
        np.testing.assert_allclose(res.values, expected[res.rows], rtol=1e-10, atol=1e-12)

    def test_uncovered_rows_are_skipped(self, toy4):
        res = oob_residuals(toy4, np.array([np.nan, 1.5, 4.0, np.nan]))
        np.testing.assert_array_equal(res.rows, [1, 2])
        assert res.n_uncovered == 2
        with pytest.raises(EstimationError):
            oob_residuals(toy4, np.array([np.nan, 1.5, np.nan, np.nan]))


class TestSigma2:
    def test_examples(self):
        assert sigma2_rf(np.array([1.0, -1.0])) == 1.0
        assert sigma2_rf(np.array([0.3, 0.3, 0.3])) == 0.0
        assert sigma2_rf(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(1.25)

    def test_needs_two_residuals(self):
        with pytest.raises(EstimationError):
            sigma2_rf(np.array([1.0]))

    def test_fast_factor(self):
        assert 2.0 * fast_factor(10) == pytest.approx(1.98)
        assert fast_factor(1) == 0.0


class TestBootstrapRefit:
    def test_zero_noise_gives_smoothed_base(self, weighted):
        weights, base = weighted
        out = bootstrap_refit(weights, base, base)
        expected = weights.dense() @ base
        np.testing.assert_allclose(out[weights.covered], expected[weights.covered], rtol=1e-12)
        assert np.all(np.isnan(out[~weights.covered]))

    def test_two_paths_agree(self, make_dataset, fit_forest):
        for seed in range(3):
            ds = make_dataset(50, 2, seed=100 + seed)
            forest = fit_forest(ds, num_trees=80, master_seed=seed)
            weights = oob_weight_matrix(forest, ds)
            base = bootstrap_base(forest, ds, oob_predictions(forest, ds))
            s2 = sigma2_rf(oob_residuals(ds, oob_predictions(forest, ds)))
            rng = np.random.default_rng(seed)
            for _ in range(20):
                y_star = base + rng.normal(0.0, np.sqrt(s2), size=ds.n)
                linear = bootstrap_refit(weights, base, y_star)
                direct = refit_by_substitution(forest, ds, y_star)
                np.testing.assert_allclose(linear, direct, rtol=1e-10, atol=1e-12, equal_nan=True)

    def test_base_fills_uncovered_rows(self, small_forest, small_dataset):
        m_oob = oob_predictions(small_forest, small_dataset)
        m_oob[:3] = np.nan
        base = bootstrap_base(small_forest, small_dataset, m_oob)
        np.testing.assert_array_equal(base[:3], predict_many(small_forest, small_dataset.features[:3]))
        np.testing.assert_array_equal(base[3:], m_oob[3:])

    def test_rejects_nan_vectors(self, weighted):
        weights, base = weighted
        bad = base.copy()
        bad[0] = np.nan
        with pytest.raises(ValueError):
            bootstrap_refit(weights, base, bad)


class TestCorrection:
    def test_closed_form_matches_row_expectation(self, make_dataset, fit_forest):
        ds = make_dataset(6, 1, seed=9)
        forest = fit_forest(ds, num_trees=200, master_seed=3)
        weights = oob_weight_matrix(forest, ds)
        m = bootstrap_base(forest, ds, oob_predictions(forest, ds))
        W = weights.dense()
        s2 = 0.7

        terms = []
        for i in np.flatnonzero(weights.covered):
            mean_i = sum(W[i, j] * m[j] for j in range(ds.n))
            var_i = sum(W[i, j] ** 2 * s2 for j in range(ds.n))
            terms.append((mean_i - m[i]) ** 2 + var_i)
        assert r_infinity(weights, m, s2) == pytest.approx(np.mean(terms), rel=1e-12)

    def test_zero_variance(self, weighted):
        weights, base = weighted
        cov = weights.covered
        expected = np.mean((weights.dot(base)[cov] - base[cov]) ** 2)
        assert r_infinity(weights, base, 0.0) == pytest.approx(expected, rel=1e-12)
        est = r_hat_B(weights, base, 0.0, BootstrapConfig(B=5))
        assert est.value == pytest.approx(expected, rel=1e-12)

    def test_monte_carlo_converges_to_closed_form(self, make_dataset, fit_forest):
        for seed in range(3):
            ds = make_dataset(200, 3, seed=500 + seed)
            forest = fit_forest(ds, num_trees=100, master_seed=seed)
            weights = oob_weight_matrix(forest, ds)
            base = bootstrap_base(forest, ds, oob_predictions(forest, ds))
            s2 = sigma2_rf(oob_residuals(ds, oob_predictions(forest, ds)))

            est = r_hat_B(weights, base, s2, BootstrapConfig(B=2000, bootstrap_seed=seed))
            assert abs(est.value - r_infinity(weights, base, s2)) <= 4 * est.standard_error

    def test_deterministic_across_threads(self, weighted):
        weights, base = weighted
        cfg = BootstrapConfig(B=30, bootstrap_seed=77)
        one = r_hat_B(weights, base, 1.3, cfg, threads=1)
        again = r_hat_B(weights, base, 1.3, cfg, threads=1)
        two = r_hat_B(weights, base, 1.3, cfg, threads=2)
        assert one.value == again.value == two.value
        np.testing.assert_array_equal(one.terms, two.terms)


class TestEstimateAll:
    def test_fast_estimate_is_one_multiply(self, small_forest, small_dataset):
        report = estimate_all(small_forest, small_dataset)
        a_n = small_forest.subsample_size
        assert report.sigma2_fast == report.sigma2_rf * (1.0 - 1.0 / (a_n * a_n))
        assert report.sigma2_rf >= report.sigma2_fast
        assert report.lower_bound == report.sigma2_rf / (a_n * a_n)

    def test_closed_form_only(self, small_forest, small_dataset):
        report = estimate_all(small_forest, small_dataset)
        assert report.B == 0
        assert report.sigma2_boot_mc is None and report.r_hat_B is None
        assert report.sigma2_boot_closed == report.sigma2_rf - report.r_infinity
        assert report.clamped_boot == max(0.0, report.sigma2_boot_closed)

    def test_monte_carlo_fields(self, small_forest, small_dataset):
        report = estimate_all(small_forest, small_dataset, BootstrapConfig(B=50, bootstrap_seed=1))
        assert report.B == 50
        assert report.sigma2_boot_mc == report.sigma2_rf - report.r_hat_B

    def test_default_schedule_keeps_ordering(self, make_dataset, fit_forest):
        for seed in range(6):
            ds = make_dataset(40 + 10 * seed, 2, seed=seed)
            report = estimate_all(fit_forest(ds, num_trees=60, master_seed=seed), ds)
            assert report.ordering_ok
            assert report.sigma2_rf >= report.sigma2_fast >= report.sigma2_boot_closed
            assert report.r_infinity >= report.lower_bound

    def test_too_few_trees(self, small_dataset, fit_forest):
        with pytest.raises(CoverageError):
            estimate_all(fit_forest(small_dataset, num_trees=1), small_dataset)

    def test_report_json(self, small_forest, small_dataset):
        report = estimate_all(small_forest, small_dataset)
        doc = json.loads(report.to_json())
        assert set(doc) == set(VarianceReport.model_fields)
        assert doc["sigma2_rf"] == report.sigma2_rf
        assert doc["sigma2_boot_mc"] is None
