import json

import numpy as np
import pandas as pd
import pytest

from rfvar.errors import ConfigError
from rfvar.harness import (
    RECORD_COLUMNS,
    aggregate_records,
    make_plan,
    run_consistency_sweep,
    run_job,
    run_m_convergence,
    run_ordering_study,
    run_plan_m_convergence,
    write_result,
)
from rfvar.config import resolve_forest_config
from rfvar.forest import build_forest
from rfvar.oob import oob_predictions
from rfvar.simulation import canonical_model, generate_dataset, named_model


@pytest.fixture
def tiny_plan():
    return make_plan(
        model=named_model("zero", p=2),
        n_grid=[50],
        reps=2,
        forest_defaults={"num_trees": 40},
        plan_seed=3,
    )


class TestPlan:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"n_grid": [100, 100]},
            {"n_grid": [200, 100]},
            {"reps": 1},
            {"forest_defaults": {"subsample_size": 10}},
            {"a_n_schedule": "sqrt"},
            {"m_grid": [400, 100]},
            {"m_grid": [0, 100]},
            {"m_grid": []},
        ],
    )
    def test_invalid(self, overrides):
        base = {"model": canonical_model(), "n_grid": [100, 200], "reps": 2}
        with pytest.raises(ConfigError):
            make_plan(**{**base, **overrides})


class TestConsistencySweep:
    def test_structure(self, tiny_plan, tmp_path):
        result = run_consistency_sweep(tiny_plan)
        assert len(result.records) == 2
        assert list(result.records.columns[: len(RECORD_COLUMNS)]) == RECORD_COLUMNS
        assert result.records["rep"].tolist() == [0, 1]
        assert result.records["sigma2_boot_mc"].isna().all()
        assert result.checks["rf_ge_fast"]
        assert not result.failed

        csv_path, json_path = write_result(result, tmp_path)
        assert list(pd.read_csv(csv_path).columns) == RECORD_COLUMNS
        doc = json.loads(json_path.read_text(encoding="utf-8"))
        assert doc["kind"] == "consistency"
        assert len(doc["records"]) == 2
        assert "oob_l2_error" in doc["records"][0]

    def test_records_are_reproducible_per_job(self, tiny_plan):
        result = run_consistency_sweep(tiny_plan)
        again = run_job(tiny_plan, cell=0, rep=1)
        assert again["sigma2_rf"] == result.records.loc[1, "sigma2_rf"]
        assert again["r_infinity"] == result.records.loc[1, "r_infinity"]

    def test_aggregates_recompute(self, tiny_plan):
        result = run_consistency_sweep(tiny_plan)
        pd.testing.assert_frame_equal(aggregate_records(result.records), result.aggregates)

        rf = result.aggregates.set_index("estimator").loc["sigma2_rf"]
        bias = result.records["sigma2_rf"] - result.records["sigma2_true"]
        assert rf["mse"] == pytest.approx(np.mean(bias**2))
        assert rf["median_abs_bias"] == pytest.approx(np.median(np.abs(bias)))

    def test_theory_schedule_records(self):
        plan = make_plan(
            model=named_model("zero", p=1),
            n_grid=[50, 100],
            reps=2,
            forest_defaults={"num_trees": 60},
            a_n_schedule="theory",
        )
        records = run_consistency_sweep(plan).records
        by_n = records.groupby("n")["a_n"].first()
        ratios = (by_n**2 / by_n.index).tolist()
        assert ratios[1] < ratios[0]

    def test_threads_do_not_change_records(self, tiny_plan):
        one = run_consistency_sweep(tiny_plan, threads=1).records
        two = run_consistency_sweep(tiny_plan, threads=2).records
        pd.testing.assert_frame_equal(one, two)

    def test_trend_checks_need_two_cells(self, tiny_plan):
        assert "mse_rf_decreasing" not in run_consistency_sweep(tiny_plan).checks

        plan = make_plan(
            model=named_model("zero", p=2),
            n_grid=[40, 80],
            reps=2,
            forest_defaults={"num_trees": 30},
            plan_seed=4,
        )
        result = run_consistency_sweep(plan)
        rf = result.aggregates.set_index(["estimator", "n"]).loc["sigma2_rf"]
        assert result.checks["mse_rf_decreasing"] == (rf.loc[80, "mse"] < rf.loc[40, "mse"])
        assert {"median_abs_bias_rf_decreasing", "oob_l2_error_decreasing"} <= set(result.checks)

    @pytest.mark.slow
    def test_sigma2_rf_consistency(self):
        plan = make_plan(
            model=canonical_model(sigma=1.0),
            n_grid=[200, 800, 3200],
            reps=20,
            forest_defaults={"num_trees": 300},
            plan_seed=2024,
        )
        result = run_consistency_sweep(plan, threads=4)
        assert result.checks["median_abs_bias_rf_decreasing"]
        assert result.checks["mse_rf_decreasing"]
        rf = result.aggregates.set_index(["estimator", "n"]).loc["sigma2_rf"]
        assert rf.loc[3200, "median_abs_bias"] <= 0.15

    @pytest.mark.slow
    def test_sigma2_rf_band_at_500(self):
        plan = make_plan(
            model=named_model("zero", p=5),
            n_grid=[500],
            reps=20,
            forest_defaults={"num_trees": 300},
            plan_seed=7,
        )
        records = run_consistency_sweep(plan, threads=4).records
        assert len(records) == 20
        assert records["sigma2_rf"].between(0.8, 1.3).all()

    @pytest.mark.slow
    def test_noiseless_estimate_shrinks_with_n(self):
        plan = make_plan(
            model=canonical_model(sigma=0.0),
            n_grid=[100, 200, 400],
            reps=10,
            forest_defaults={"num_trees": 200},
            plan_seed=19,
        )
        records = run_consistency_sweep(plan, threads=4).records
        assert (records["sigma2_true"] == 0.0).all()
        medians = records.groupby("n")["sigma2_rf"].median()
        assert medians.index.tolist() == [100, 200, 400]
        assert medians[100] > medians[200] > medians[400] > 0.0


class TestOrderingStudy:
    def test_practical_schedule(self):
        plan = make_plan(
            model=canonical_model(),
            n_grid=[30, 40, 50, 60, 80, 100],
            reps=10,
            forest_defaults={"num_trees": 40},
            plan_seed=11,
        )
        result = run_ordering_study(plan, threads=2)
        table = result.aggregates
        assert len(result.records) == 60
        assert (table["freq_rf_ge_fast"] == 1.0).all()
        assert (table["freq_fast_ge_boot_closed"] == 1.0).all()
        assert table["bound_forced"].all()
        assert result.checks == {
            "rf_ge_fast_always": True,
            "fast_ge_boot_closed_when_forced": True,
            "no_failed_cells": True,
        }


class TestMConvergence:
    def test_table(self):
        table = run_m_convergence(named_model("zero", p=2), n=40, m_grid=[20, 80], reps=3, seed=1)
        assert table["M"].tolist() == [20, 80]
        assert set(table.columns) >= {"sd_sigma2_rf", "sd_probe", "mean_probe"}

    def test_rejects_single_rep(self):
        with pytest.raises(ConfigError):
            run_m_convergence(canonical_model(), n=50, m_grid=[10, 20], reps=1, seed=0)

    def test_rejects_unordered_grid(self):
        with pytest.raises(ConfigError):
            run_m_convergence(canonical_model(), n=50, m_grid=[20, 10], reps=3, seed=0)

    @pytest.mark.slow
    def test_probe_sd_shrinks_with_more_trees(self):
        table = run_m_convergence(canonical_model(), n=200, m_grid=[100, 400], reps=50, seed=3, threads=4)
        sd = table.set_index("M")["sd_probe"]
        assert sd[400] <= 0.7 * sd[100]

    def test_plan_drives_grid(self):
        plan = make_plan(
            model=named_model("zero", p=2),
            n_grid=[40, 60],
            reps=2,
            forest_defaults={"num_trees": 300},
            a_n_schedule="theory",
            m_grid=[10, 30],
            plan_seed=8,
        )
        table = run_plan_m_convergence(plan, cell=1, probe=2)
        direct = run_m_convergence(
            plan.model, n=60, m_grid=[10, 30], reps=2, seed=8,
            forest_defaults={"subsample_size": 7}, probe=2,
        )
        pd.testing.assert_frame_equal(table, direct)

    def test_plan_without_grid(self, tiny_plan):
        with pytest.raises(ConfigError):
            run_plan_m_convergence(tiny_plan)
        with pytest.raises(ConfigError):
            run_plan_m_convergence(tiny_plan.model_copy(update={"m_grid": [5, 10]}), cell=3)

    @pytest.mark.slow
    def test_independent_large_forests_agree(self):
        ds = generate_dataset(named_model("zero", p=2), 30, seed=21).dataset
        preds = []
        for master_seed in (1, 2):
            cfg = resolve_forest_config(ds.n, ds.p, {"num_trees": 5000, "master_seed": master_seed})
            preds.append(oob_predictions(build_forest(ds, cfg, threads=4), ds))
        a, b = preds
        both = np.isfinite(a) & np.isfinite(b)
        assert both.all()
        assert np.sqrt(np.mean((a[both] - b[both]) ** 2)) <= 0.05
