# rfvar/harness.py
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from rfvar.config import BootstrapConfig, resolve_forest_config, validated
from rfvar.errors import ConfigError, EstimationError
from rfvar.forest import build_forest
from rfvar.oob import oob_predictions
from rfvar.schedules import Schedule, check_schedule, subsample_size_for
from rfvar.simulation import SimulationModel, generate_dataset
from rfvar.variance import estimate_all, oob_residuals, sigma2_rf

logger = logging.getLogger(__name__)

# per-rep CSV schema
RECORD_COLUMNS = [
    "n", "M", "a_n", "rep", "sigma2_true",
    "sigma2_rf", "sigma2_fast", "sigma2_boot_mc", "sigma2_boot_closed",
    "r_hat_B", "r_infinity", "n_covered",
]
ESTIMATORS = ["sigma2_rf", "sigma2_fast", "sigma2_boot_closed", "sigma2_boot_mc"]


class ExperimentPlan(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: SimulationModel
    n_grid: list[int] = Field(min_length=1)
    reps: int = Field(ge=2)
    forest_defaults: dict[str, Any] = Field(default_factory=lambda: {"num_trees": 300})
    a_n_schedule: Schedule = "practical"
    m_grid: Optional[list[int]] = None
    boot: Optional[BootstrapConfig] = None
    plan_seed: int = Field(default=0, ge=0)

    @field_validator("n_grid")
    @classmethod
    def _grid_increasing(cls, grid: list[int]) -> list[int]:
        if any(n < 2 for n in grid):
            raise ValueError(f"every n must be >= 2, got {grid}")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"n_grid must be strictly increasing, got {grid}")
        return grid

    @field_validator("forest_defaults")
    @classmethod
    def _schedule_owns_subsample(cls, d: dict[str, Any]) -> dict[str, Any]:
        clash = {"subsample_size", "subsample_frac", "master_seed"} & {k for k, v in d.items() if v is not None}
        if clash:
            raise ValueError(f"{sorted(clash)} are set per cell by the plan, not in forest_defaults")
        return d

    @model_validator(mode="after")
    def _schedule_fits_grid(self) -> "ExperimentPlan":
        try:
            check_schedule(self.n_grid, self.a_n_schedule)
        except ConfigError as e:
            raise ValueError(str(e))
        if self.m_grid is not None and (
            not self.m_grid or self.m_grid[0] < 1 or any(b <= a for a, b in zip(self.m_grid, self.m_grid[1:]))
        ):
            raise ValueError(f"m_grid must be strictly increasing positive integers, got {self.m_grid}")
        return self


def make_plan(**kwargs: Any) -> ExperimentPlan:
    return validated(ExperimentPlan, kwargs)


@dataclass
class ExperimentResult:
    kind: str
    plan: ExperimentPlan
    records: pd.DataFrame
    aggregates: pd.DataFrame
    checks: dict[str, bool]
    failed: list[dict[str, Any]] = field(default_factory=list)


# -----------------------------
# Jobs
# -----------------------------
def job_seeds(plan_seed: int, cell: int, rep: int) -> tuple[int, int, int]:
    """(data, forest, bootstrap) seeds of one (cell, rep) job."""
    state = np.random.SeedSequence([plan_seed, cell, rep]).generate_state(3, dtype=np.uint64)
    return int(state[0]), int(state[1]), int(state[2])


def run_job(plan: ExperimentPlan, cell: int, rep: int) -> dict[str, Any]:
    """One (dataset, forest) draw; reproducible from (plan_seed, cell, rep) alone."""
    n = plan.n_grid[cell]
    a_n = subsample_size_for(n, plan.a_n_schedule)
    data_seed, master_seed, boot_seed = job_seeds(plan.plan_seed, cell, rep)

    sim = generate_dataset(plan.model, n, data_seed)
    cfg = resolve_forest_config(
        n, plan.model.p, {**plan.forest_defaults, "subsample_size": a_n, "master_seed": master_seed}
    )
    forest = build_forest(sim.dataset, cfg, threads=1)

    boot = plan.boot.model_copy(update={"bootstrap_seed": boot_seed}) if plan.boot else None
    report = estimate_all(forest, sim.dataset, boot)

    m_oob = oob_predictions(forest, sim.dataset)
    covered = np.isfinite(m_oob)
    oob_l2 = float(np.mean((m_oob[covered] - sim.m_values[covered]) ** 2))

    return {
        "n": n,
        "M": cfg.num_trees,
        "a_n": a_n,
        "rep": rep,
        "sigma2_true": sim.sigma2,
        "sigma2_rf": report.sigma2_rf,
        "sigma2_fast": report.sigma2_fast,
        "sigma2_boot_mc": np.nan if report.sigma2_boot_mc is None else report.sigma2_boot_mc,
        "sigma2_boot_closed": report.sigma2_boot_closed,
        "r_hat_B": np.nan if report.r_hat_B is None else report.r_hat_B,
        "r_infinity": report.r_infinity,
        "n_covered": report.n_covered,
        "oob_l2_error": oob_l2,
        "bound_ratio": report.r_infinity / report.lower_bound if report.lower_bound > 0 else np.nan,
    }


def _run_job_safe(plan: ExperimentPlan, cell: int, rep: int) -> dict[str, Any]:
    try:
        return run_job(plan, cell, rep)
    except EstimationError as e:
        logger.warning("⚠️ cell %d rep %d failed: %s", cell, rep, e)
        return {"cell": cell, "n": plan.n_grid[cell], "rep": rep, "error": str(e)}


def _run_all(plan: ExperimentPlan, threads: int) -> tuple[pd.DataFrame, list[dict[str, Any]]]:
    jobs = [(c, r) for c in range(len(plan.n_grid)) for r in range(plan.reps)]
    out = Parallel(n_jobs=threads)(delayed(_run_job_safe)(plan, c, r) for c, r in jobs)

    ok = [o for o in out if "error" not in o]
    failed = [o for o in out if "error" in o]
    records = pd.DataFrame(ok, columns=RECORD_COLUMNS + ["oob_l2_error", "bound_ratio"])
    for n in plan.n_grid:
        logger.info("cell n=%d finished: %d/%d reps ok", n, int((records["n"] == n).sum()), plan.reps)
    return records, failed


# -----------------------------
# Aggregation
# -----------------------------
def aggregate_records(records: pd.DataFrame) -> pd.DataFrame:
    """Per (n, estimator): mean/median bias, median |bias|, MSE and sd over reps."""
    rows = []
    for n, group in records.groupby("n", sort=True):
        for est in ESTIMATORS:
            values = group[est].to_numpy(dtype=np.float64)
            if np.all(np.isnan(values)):
                continue
            bias = values - group["sigma2_true"].to_numpy(dtype=np.float64)
            rows.append({
                "n": int(n),
                "estimator": est,
                "reps": int(values.size),
                "mean_bias": float(np.mean(bias)),
                "median_bias": float(np.median(bias)),
                "median_abs_bias": float(np.median(np.abs(bias))),
                "mse": float(np.mean(bias * bias)),
                "sd": float(np.std(values, ddof=1)) if values.size > 1 else float("nan"),
                "median_oob_l2_error": float(np.median(group["oob_l2_error"])),
            })
    return pd.DataFrame(rows)


def _strictly_decreasing(values: list[float]) -> bool:
    return len(values) >= 2 and all(b < a for a, b in zip(values, values[1:]))


def run_consistency_sweep(plan: ExperimentPlan, threads: int = 1) -> ExperimentResult:
    """reps independent (dataset, forest) draws per n; every estimator against the true sigma^2."""
    records, failed = _run_all(plan, threads)
    aggregates = aggregate_records(records)

    rf = aggregates[aggregates["estimator"] == "sigma2_rf"] if len(aggregates) else pd.DataFrame()
    forced = records["a_n"] ** 2 >= records["n"]
    checks = {
        "rf_ge_fast": bool((records["sigma2_rf"] >= records["sigma2_fast"]).all()),
        "fast_ge_boot_closed_when_forced": bool(
            (records.loc[forced, "sigma2_fast"] >= records.loc[forced, "sigma2_boot_closed"]).all()
        ),
        "no_failed_cells": not failed,
    }
    if len(plan.n_grid) >= 2 and len(rf) == len(plan.n_grid):
        checks["median_abs_bias_rf_decreasing"] = _strictly_decreasing(rf["median_abs_bias"].tolist())
        checks["mse_rf_decreasing"] = _strictly_decreasing(rf["mse"].tolist())
        checks["oob_l2_error_decreasing"] = _strictly_decreasing(rf["median_oob_l2_error"].tolist())

    return ExperimentResult("consistency", plan, records, aggregates, checks, failed)


def ordering_table(records: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for n, group in records.groupby("n", sort=True):
        a_n = int(group["a_n"].iloc[0])
        ratio = group["bound_ratio"].to_numpy(dtype=np.float64)
        rows.append({
            "n": int(n),
            "a_n": a_n,
            "reps": len(group),
            "bound_forced": a_n * a_n >= n,
            "freq_rf_ge_fast": float(np.mean(group["sigma2_rf"] >= group["sigma2_fast"])),
            "freq_fast_ge_boot_closed": float(np.mean(group["sigma2_fast"] >= group["sigma2_boot_closed"])),
            "min_bound_ratio": float(np.nanmin(ratio)) if np.isfinite(ratio).any() else float("nan"),
            "median_bound_ratio": float(np.nanmedian(ratio)) if np.isfinite(ratio).any() else float("nan"),
        })
    return pd.DataFrame(rows)


def run_ordering_study(plan: ExperimentPlan, threads: int = 1) -> ExperimentResult:
    """Per cell: how often sigma2_rf >= sigma2_fast >= sigma2_boot_closed holds, and the bound ratio."""
    records, failed = _run_all(plan, threads)
    table = ordering_table(records)
    if table.empty:
        checks = {"rf_ge_fast_always": False, "fast_ge_boot_closed_when_forced": False, "no_failed_cells": False}
        return ExperimentResult("ordering", plan, records, table, checks, failed)

    forced = table[table["bound_forced"]]
    checks = {
        "rf_ge_fast_always": bool((table["freq_rf_ge_fast"] == 1.0).all()),
        "fast_ge_boot_closed_when_forced": bool((forced["freq_fast_ge_boot_closed"] == 1.0).all()),
        "no_failed_cells": not failed,
    }
    for _, row in table.iterrows():
        if row["min_bound_ratio"] < 1.0:
            logger.info("n=%d: bound ratio dips to %.4g (a_n=%d)", row["n"], row["min_bound_ratio"], row["a_n"])
    return ExperimentResult("ordering", plan, records, table, checks, failed)


def run_m_convergence(
    model: SimulationModel,
    n: int,
    m_grid: list[int],
    reps: int,
    seed: int,
    forest_defaults: Optional[dict[str, Any]] = None,
    probe: int = 0,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Fixed dataset, `reps` independent forests per M: Monte-Carlo sd of
    sigma2_rf and of the OOB prediction at row `probe`.
    """
    if reps < 2:
        raise ConfigError(f"reps must be >= 2 for a standard deviation, got {reps}")
    if not m_grid or any(m < 1 for m in m_grid) or any(b <= a for a, b in zip(m_grid, m_grid[1:])):
        raise ConfigError(f"m_grid must be strictly increasing positive integers, got {m_grid}")
    if not 0 <= probe < n:
        raise ConfigError(f"probe row {probe} outside [0, {n})")

    data_seed = int(np.random.SeedSequence([seed, 0]).generate_state(1, dtype=np.uint64)[0])
    sim = generate_dataset(model, n, data_seed)
    base = {k: v for k, v in (forest_defaults or {}).items() if k != "num_trees"}

    def forest_seed(k: int, rep: int) -> int:
        return int(np.random.SeedSequence([seed, 1, k, rep]).generate_state(1, dtype=np.uint64)[0])

    jobs = [(k, m, rep) for k, m in enumerate(m_grid) for rep in range(reps)]
    out = Parallel(n_jobs=threads)(
        delayed(_m_convergence_job)(sim.dataset, base, m, forest_seed(k, rep), probe) for k, m, rep in jobs
    )

    rows = []
    for k, m in enumerate(m_grid):
        chunk = out[k * reps : (k + 1) * reps]
        s2 = np.array([c[0] for c in chunk])
        pr = np.array([c[1] for c in chunk])
        rows.append({
            "M": m,
            "reps": reps,
            "mean_sigma2_rf": float(np.nanmean(s2)),
            "sd_sigma2_rf": float(np.nanstd(s2, ddof=1)),
            "mean_probe": float(np.nanmean(pr)),
            "sd_probe": float(np.nanstd(pr, ddof=1)),
            "uncovered_probe": int(np.isnan(pr).sum()),
        })
    return pd.DataFrame(rows)


def run_plan_m_convergence(plan: ExperimentPlan, cell: int = 0, probe: int = 0, threads: int = 1) -> pd.DataFrame:
    """run_m_convergence over plan.m_grid at n = plan.n_grid[cell], with the plan's a_n, reps and seed."""
    if plan.m_grid is None:
        raise ConfigError("plan has no m_grid")
    if not 0 <= cell < len(plan.n_grid):
        raise ConfigError(f"cell {cell} outside n_grid {plan.n_grid}")
    n = plan.n_grid[cell]
    defaults = {**plan.forest_defaults, "subsample_size": subsample_size_for(n, plan.a_n_schedule)}
    return run_m_convergence(
        plan.model, n, plan.m_grid, plan.reps, plan.plan_seed,
        forest_defaults=defaults, probe=probe, threads=threads,
    )


def _m_convergence_job(dataset, base: dict[str, Any], num_trees: int, master_seed: int, probe: int):
    cfg = resolve_forest_config(dataset.n, dataset.p, {**base, "num_trees": num_trees, "master_seed": master_seed})
    forest = build_forest(dataset, cfg, threads=1)
    m_oob = oob_predictions(forest, dataset)
    try:
        s2 = sigma2_rf(oob_residuals(dataset, m_oob))
    except EstimationError:
        s2 = np.nan
    return s2, float(m_oob[probe])


# -----------------------------
# Writers
# -----------------------------
def _json_default(o: Any) -> Any:
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return None if math.isnan(o) else float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def frame_records(df: pd.DataFrame) -> list[dict[str, Any]]:
    out = []
    for row in df.to_dict("records"):
        out.append({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
    return out


def write_frame(df: pd.DataFrame, path: str | Path) -> None:
    df.to_csv(path, index=False)


def write_result(result: ExperimentResult, out_dir: str | Path) -> tuple[Path, Path]:
    """
    <out_dir>/<kind>_records.csv   per-rep rows, RECORD_COLUMNS only
    <out_dir>/<kind>_aggregate.json  plan, checks (pass/fail), aggregates, all per-rep values
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{result.kind}_records.csv"
    json_path = out_dir / f"{result.kind}_aggregate.json"

    write_frame(result.records[RECORD_COLUMNS], csv_path)
    payload = {
        "kind": result.kind,
        "plan": result.plan.model_dump(),
        "checks": result.checks,
        "aggregates": frame_records(result.aggregates),
        "failed": result.failed,
        "records": frame_records(result.records),
    }
    json_path.write_text(json.dumps(payload, indent=2, default=_json_default), encoding="utf-8")
    logger.info("✅ %s results written to %s", result.kind, out_dir)
    return csv_path, json_path
