# rfvar/config.py
from __future__ import annotations

import logging
import math
import os
from typing import Any, Literal, Optional, TypeVar

import joblib
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rfvar.errors import ConfigError

logger = logging.getLogger(__name__)

MAX_SEED = 2**64 - 1

FOREST_DEFAULTS: dict[str, Any] = {
    "num_trees": 500,
    "mtry": None,            # max(1, ceil(p/3))
    "subsample_size": None,  # ceil(subsample_frac * n)
    "subsample_frac": 0.632,
    "max_leaves": None,      # = subsample_size (fully grown)
    "min_leaf_size": 1,
    "resampling": "without_replacement",
    "master_seed": 0,
}

BOOT_DEFAULTS: dict[str, Any] = {
    "B": 0,  # 0 = closed-form correction only
    "noise": "normal",
    "bootstrap_seed": 0,
}

RUN_DEFAULTS: dict[str, Any] = {
    "threads": 1,
    "log_level": "INFO",
}

Resampling = Literal["without_replacement", "with_replacement"]

M = TypeVar("M", bound=BaseModel)


class ForestConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_trees: int = Field(ge=1)
    mtry: int = Field(ge=1)
    subsample_size: int = Field(ge=1)
    max_leaves: int = Field(ge=1)
    min_leaf_size: int = Field(default=1, ge=1)
    resampling: Resampling = "without_replacement"
    master_seed: int = Field(default=0, ge=0, le=MAX_SEED)

    @model_validator(mode="after")
    def _leaves_fit_subsample(self) -> "ForestConfig":
        if self.max_leaves > self.subsample_size:
            raise ValueError(
                f"max_leaves ({self.max_leaves}) exceeds subsample_size ({self.subsample_size})"
            )
        return self

    @property
    def with_replacement(self) -> bool:
        return self.resampling == "with_replacement"

    def check_against(self, n: int, p: int) -> None:
        """Raise ConfigError unless this config can be used on an n x p dataset."""
        if self.mtry > p:
            raise ConfigError(f"mtry ({self.mtry}) exceeds number of features ({p})")
        if not self.with_replacement and self.subsample_size > n:
            raise ConfigError(
                f"subsample_size ({self.subsample_size}) exceeds n ({n}) "
                "under sampling without replacement"
            )


class BootstrapConfig(BaseModel):
    """Parametric bootstrap settings. The noise variance is always the current sigma2_rf."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    B: int = Field(ge=1)
    noise: Literal["normal"] = "normal"
    bootstrap_seed: int = Field(default=0, ge=0, le=MAX_SEED)


def validated(model: type[M], data: dict[str, Any]) -> M:
    """Build a pydantic model, turning validation failures into ConfigError."""
    try:
        return model(**data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(x) for x in err['loc']) or model.__name__}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"invalid {model.__name__}: {problems}") from e


def subsample_from_frac(frac: float, n: int) -> int:
    if not (frac > 0):
        raise ConfigError(f"subsample_frac must be > 0, got {frac}")
    # round first so that e.g. 0.632 * 1000 does not ceil to 633
    return max(1, math.ceil(round(frac * n, 9)))


def resolve_forest_config(n: int, p: int, overrides: Optional[dict[str, Any]] = None) -> ForestConfig:
    """
    Merge overrides onto FOREST_DEFAULTS and fill the data-dependent defaults:
      mtry = max(1, ceil(p/3)), subsample_size = ceil(0.632 n), max_leaves = subsample_size.
    None values in overrides mean "use the default".
    """
    given = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(given) - set(FOREST_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown forest option(s): {', '.join(sorted(unknown))}")
    if "subsample_size" in given and "subsample_frac" in given:
        raise ConfigError("give subsample_size or subsample_frac, not both")

    data = {**FOREST_DEFAULTS, **given}
    frac = data.pop("subsample_frac")

    if data["mtry"] is None:
        data["mtry"] = max(1, math.ceil(p / 3))
    if data["subsample_size"] is None:
        data["subsample_size"] = subsample_from_frac(frac, n)
    if data["max_leaves"] is None:
        data["max_leaves"] = data["subsample_size"]

    cfg = validated(ForestConfig, data)
    cfg.check_against(n, p)
    return cfg


def resolve_boot_config(overrides: Optional[dict[str, Any]] = None) -> Optional[BootstrapConfig]:
    """Returns None when B == 0 (closed-form correction only)."""
    data = {**BOOT_DEFAULTS, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    if data["B"] == 0:
        return None
    return validated(BootstrapConfig, data)


def parse_threads(value: Any) -> int:
    if isinstance(value, str) and value.strip().lower() == "auto":
        return max(1, joblib.cpu_count())
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"threads must be a positive integer or 'auto', got {value!r}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def load_run_config() -> dict[str, Any]:
    """
    Safe loader for run-level settings:
    - reads .env (if present) without overriding real env vars
    - RFVAR_THREADS: positive int or "auto"
    - RFVAR_LOG_LEVEL: logging level name
    Malformed values fall back to RUN_DEFAULTS.
    """
    load_dotenv(override=False)
    cfg = dict(RUN_DEFAULTS)

    raw_threads = os.environ.get("RFVAR_THREADS")
    if raw_threads:
        try:
            cfg["threads"] = parse_threads(raw_threads)
        except ConfigError as e:
            logger.warning("⚠️ RFVAR_THREADS ignored: %s", e)

    level = os.environ.get("RFVAR_LOG_LEVEL")
    if level:
        cfg["log_level"] = level.upper().strip()

    return cfg
