# rfvar/errors.py
from __future__ import annotations


class RfvarError(Exception):
    """Base class; `exit_code` is what the CLI returns when this escapes."""

    exit_code = 1


class InputError(RfvarError):
    """Bad input data: unreadable CSV, missing column, non-numeric cell, n < 2."""

    exit_code = 2


class ConfigError(RfvarError):
    """Flag or config value outside its domain."""

    exit_code = 3


class EstimationError(RfvarError):
    """Variance is undefined (fewer than 2 covered rows)."""

    exit_code = 4


class CoverageError(EstimationError):
    """Too many rows have no out-of-bag tree."""
