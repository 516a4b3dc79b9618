# rfvar/data_feed.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from rfvar.errors import InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Training set: n x p features, length-n response, p column names."""

    features: np.ndarray
    response: np.ndarray
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.response, dtype=np.float64)

        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise InputError(f"features must be a 2-d matrix, got shape {x.shape}")
        if y.ndim != 1:
            raise InputError(f"response must be 1-d, got shape {y.shape}")

        n, p = x.shape
        if n < 2:
            raise InputError(f"need at least 2 rows, got {n}")
        if p < 1:
            raise InputError("need at least 1 feature column")
        if y.shape[0] != n:
            raise InputError(f"response length {y.shape[0]} != number of rows {n}")
        if not np.all(np.isfinite(x)):
            raise InputError("features contain NaN or infinite values")
        if not np.all(np.isfinite(y)):
            raise InputError("response contains NaN or infinite values")

        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(p))
        if len(names) != p:
            raise InputError(f"{len(names)} column names for {p} feature columns")
        if len(set(names)) != p:
            raise InputError(f"column names are not unique: {list(names)}")

        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def transformed(self, column: int, fn) -> "Dataset":
        x = self.features.copy()
        x[:, column] = fn(x[:, column])
        return Dataset(x, self.response, self.column_names)


def load_csv_dataset(path: str | Path, target: str, columns: Sequence[str] | None = None) -> Dataset:
    """
    Strict CSV loader.
    - comma separated, header required
    - every non-target column must be numeric (or the subset given in `columns`)
    - any empty cell rejects the file
    Raises InputError on every violation.
    """
    path = Path(path)
    try:
        header = pd.read_csv(path, header=None, nrows=1, dtype=str, keep_default_na=False)
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise InputError(f"input file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"cannot parse CSV {path}: {e}")

    # pandas renames repeated headers to "y.1", so check the raw row
    names = [str(c).strip() for c in header.iloc[0]]
    repeated = sorted({c for c in names if names.count(c) > 1})
    if repeated:
        raise InputError(f"duplicate column name(s) in {path}: {repeated}")
    if len(names) != len(df.columns):
        raise InputError(f"header of {path} has {len(names)} names but rows have {len(df.columns)} fields")
    df.columns = names

    if target not in df.columns:
        raise InputError(f"target column '{target}' not found in {path} (columns: {list(df.columns)})")

    feature_cols = list(columns) if columns else [c for c in df.columns if c != target]
    missing = [c for c in feature_cols if c not in df.columns]
    if missing:
        raise InputError(f"feature column(s) not found: {missing}")
    if not feature_cols:
        raise InputError("no feature columns besides the target")

    used = df[feature_cols + [target]]
    empty = used.apply(lambda s: s.str.strip() == "")
    if empty.to_numpy().any():
        row, col = np.argwhere(empty.to_numpy())[0]
        raise InputError(f"empty cell at data row {row + 1}, column '{used.columns[col]}'")

    numeric = used.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        name = used.columns[col]
        raise InputError(
            f"non-numeric cell at data row {row + 1}, column '{name}': {used.iloc[row, col]!r}"
        )

    ds = Dataset(
        features=numeric[feature_cols].to_numpy(dtype=np.float64),
        response=numeric[target].to_numpy(dtype=np.float64),
        column_names=tuple(feature_cols),
    )
    logger.info("loaded %s: n=%d p=%d target=%s", path.name, ds.n, ds.p, target)
    return ds
