# =========================
# main.py (fit / simulate / ordering / mconv)
# =========================
from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

# --- rfvar modules ---
from rfvar import jsonio
from rfvar.config import load_run_config, parse_threads, resolve_boot_config, resolve_forest_config, validated
from rfvar.data_feed import load_csv_dataset
from rfvar.errors import ConfigError, RfvarError
from rfvar.forest import build_forest, save_forest
from rfvar.harness import (
    frame_records,
    make_plan,
    run_consistency_sweep,
    run_m_convergence,
    run_ordering_study,
    write_frame,
    write_result,
)
from rfvar.oob import oob_weight_matrix
from rfvar.simulation import named_model
from rfvar.variance import estimate_all

__version__ = "1.0.0"
REPORT_FORMAT_VERSION = 1

logger = logging.getLogger("rfvar")


# ---------------------------
# Config model
# ---------------------------
class CliConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: Literal["fit", "simulate", "ordering", "mconv"]
    output: Path
    threads: int = Field(ge=1)
    seed: int = Field(ge=0)
    forest: dict[str, Any] = Field(default_factory=dict)
    boot: dict[str, Any] = Field(default_factory=dict)
    options: dict[str, Any] = Field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    """Flag errors are config errors (exit 3), not argparse's exit 2."""

    def error(self, message: str):
        raise ConfigError(message)


def _forest_flags(p: argparse.ArgumentParser, subsample: bool = True) -> None:
    p.add_argument("--trees", type=int, help="number of trees M (fit default 500, simulations 300)")
    p.add_argument("--mtry", type=int, help="features drawn per expansion (default ceil(p/3))")
    if subsample:
        group = p.add_mutually_exclusive_group()
        group.add_argument("--subsample-size", type=int, help="a_n (default ceil(0.632 n))")
        group.add_argument("--subsample-frac", type=float, help="a_n as a fraction of n")
    p.add_argument("--max-leaves", type=int, help="t_n (default a_n: fully grown)")
    p.add_argument("--min-leaf", type=int, help="minimum in-bag points per leaf (default 1)")
    p.add_argument("--with-replacement", action="store_true", help="bootstrap instead of subsampling")


def _boot_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--boot-reps", type=int, default=0, help="B; 0 = closed-form correction only")
    p.add_argument("--boot-seed", type=int, default=0)


def _common_flags(p: argparse.ArgumentParser, default_output: str) -> None:
    p.add_argument("--seed", type=int, default=0, help="master / plan seed")
    p.add_argument("--output", default=default_output)
    p.add_argument("--threads", default=None, help="positive integer or 'auto' (env RFVAR_THREADS)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="canonical", choices=["zero", "linear", "canonical"])
    p.add_argument("--p", type=int, default=5, help="dimension for zero / linear models")
    p.add_argument("--sigma", type=float, default=1.0, help="true noise sd")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfvar", description="Random forest residual variance estimation")
    parser.add_argument("--version", action="version", version=f"rfvar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a forest on a CSV and write a variance report")
    fit.add_argument("--input", required=True, help="CSV with header")
    fit.add_argument("--target", required=True, help="response column")
    fit.add_argument("--export-forest", default=None, help="also write the forest JSON here")
    fit.add_argument("--export-weights", default=None, help="also write the OOB weight matrix CSV here")
    _forest_flags(fit)
    _boot_flags(fit)
    _common_flags(fit, "report.json")

    for name, help_text in (
        ("simulate", "consistency sweep over an n grid"),
        ("ordering", "ordering study sigma2_rf >= sigma2_fast >= sigma2_boot"),
    ):
        sp = sub.add_parser(name, help=help_text)
        _model_flags(sp)
        sp.add_argument("--n", type=int, nargs="+", required=True, help="n grid (strictly increasing)")
        sp.add_argument("--reps", type=int, default=20)
        sp.add_argument("--schedule", default="practical", choices=["practical", "theory"])
        _forest_flags(sp, subsample=False)
        _boot_flags(sp)
        _common_flags(sp, "results")

    mconv = sub.add_parser("mconv", help="Monte-Carlo sd of OOB quantities versus M")
    _model_flags(mconv)
    mconv.add_argument("--n", type=int, required=True)
    mconv.add_argument("--m-grid", type=int, nargs="+", required=True)
    mconv.add_argument("--reps", type=int, default=50)
    mconv.add_argument("--probe", type=int, default=0, help="row whose OOB prediction is tracked")
    _forest_flags(mconv)
    _common_flags(mconv, "results")

    return parser


def config_from_args(args: argparse.Namespace, default_threads: int) -> CliConfig:
    threads = parse_threads(args.threads) if args.threads is not None else default_threads
    forest = {
        "num_trees": args.trees,
        "mtry": args.mtry,
        "subsample_size": getattr(args, "subsample_size", None),
        "subsample_frac": getattr(args, "subsample_frac", None),
        "max_leaves": args.max_leaves,
        "min_leaf_size": args.min_leaf,
        "resampling": "with_replacement" if args.with_replacement else None,
    }
    boot = {}
    if hasattr(args, "boot_reps"):
        boot = {"B": args.boot_reps, "bootstrap_seed": args.boot_seed}
        if args.boot_reps < 0:
            raise ConfigError(f"--boot-reps must be >= 0, got {args.boot_reps}")

    options = {
        k: v for k, v in vars(args).items()
        if k in {"input", "target", "export_forest", "export_weights", "model", "p", "sigma",
                 "n", "reps", "schedule", "m_grid", "probe"}
    }
    return validated(CliConfig, {
        "command": args.command,
        "output": args.output,
        "threads": threads,
        "seed": args.seed,
        "forest": {k: v for k, v in forest.items() if v is not None},
        "boot": boot,
        "options": options,
    })


# ---------------------------
# Commands
# ---------------------------
def cmd_fit(cfg: CliConfig) -> int:
    opts = cfg.options
    ds = load_csv_dataset(opts["input"], opts["target"])
    forest_cfg = resolve_forest_config(ds.n, ds.p, {**cfg.forest, "master_seed": cfg.seed})
    boot_cfg = resolve_boot_config(cfg.boot)

    forest = build_forest(ds, forest_cfg, threads=cfg.threads)
    report = estimate_all(forest, ds, boot_cfg, threads=cfg.threads)

    payload = {
        "format_version": REPORT_FORMAT_VERSION,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "forest_config": forest_cfg.model_dump(),
        "bootstrap_config": None if boot_cfg is None else boot_cfg.model_dump(),
        "report": report.model_dump(),
    }
    _write_json(cfg.output, payload)

    if opts.get("export_forest"):
        save_forest(forest, opts["export_forest"])
    if opts.get("export_weights"):
        oob_weight_matrix(forest, ds, threads=cfg.threads).to_csv(opts["export_weights"])

    logger.info(
        "✅ sigma2_rf=%.6g sigma2_fast=%.6g sigma2_boot_closed=%.6g -> %s",
        report.sigma2_rf, report.sigma2_fast, report.sigma2_boot_closed, cfg.output,
    )
    return 0


def _plan_from(cfg: CliConfig):
    opts = cfg.options
    forest_defaults = {"num_trees": 300, **cfg.forest}
    boot_cfg = resolve_boot_config(cfg.boot)
    return make_plan(
        model=named_model(opts["model"], p=opts["p"], sigma=opts["sigma"]),
        n_grid=opts["n"],
        reps=opts["reps"],
        forest_defaults=forest_defaults,
        a_n_schedule=opts["schedule"],
        boot=boot_cfg,
        plan_seed=cfg.seed,
    )


def cmd_simulate(cfg: CliConfig) -> int:
    result = run_consistency_sweep(_plan_from(cfg), threads=cfg.threads)
    write_result(result, cfg.output)
    _log_checks(result.checks)
    return 0


def cmd_ordering(cfg: CliConfig) -> int:
    result = run_ordering_study(_plan_from(cfg), threads=cfg.threads)
    write_result(result, cfg.output)
    _log_checks(result.checks)
    return 0


def cmd_mconv(cfg: CliConfig) -> int:
    opts = cfg.options
    table = run_m_convergence(
        named_model(opts["model"], p=opts["p"], sigma=opts["sigma"]),
        n=opts["n"],
        m_grid=opts["m_grid"],
        reps=opts["reps"],
        seed=cfg.seed,
        forest_defaults=cfg.forest,
        probe=opts["probe"],
        threads=cfg.threads,
    )
    out_dir = Path(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frame(table, out_dir / "mconv.csv")
    _write_json(out_dir / "mconv.json", {
        "n": opts["n"],
        "m_grid": opts["m_grid"],
        "reps": opts["reps"],
        "seed": cfg.seed,
        "table": frame_records(table),
    })
    logger.info("✅ M-convergence table written to %s", out_dir)
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "ordering": cmd_ordering,
    "mconv": cmd_mconv,
}


def _write_json(path: str | Path, payload: dict[str, Any]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(jsonio.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _log_checks(checks: dict[str, bool]) -> None:
    for name, ok in checks.items():
        if ok:
            logger.info("✅ %s", name)
        else:
            logger.warning("⚠️ %s failed", name)


def main(argv: Optional[list[str]] = None) -> int:
    run_cfg = load_run_config()
    logging.basicConfig(
        level=getattr(logging, run_cfg["log_level"], logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args, run_cfg["threads"])
        return COMMANDS[cfg.command](cfg)
    except RfvarError as e:
        logger.error("❌ %s", e)
        print(f"rfvar: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
