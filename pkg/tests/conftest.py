from __future__ import annotations

import numpy as np
import pytest

from rfvar.config import resolve_forest_config
from rfvar.data_feed import Dataset
from rfvar.forest import build_forest


def _random_dataset(n: int, p: int, seed: int, noise: float = 1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    y = np.sin(2 * np.pi * X[:, 0]) + X[:, -1] + noise * rng.normal(size=n)
    return Dataset(X, y)


def _fit(ds: Dataset, **overrides):
    cfg = resolve_forest_config(ds.n, ds.p, overrides)
    return build_forest(ds, cfg)


@pytest.fixture
def make_dataset():
    return _random_dataset


@pytest.fixture
def fit_forest():
    return _fit


@pytest.fixture
def toy4() -> Dataset:
    """Four points, two pure groups: y = 1 on the left, 5 on the right."""
    return Dataset(np.array([[0.1], [0.2], [0.8], [0.9]]), np.array([1.0, 1.0, 5.0, 5.0]), ("x",))


@pytest.fixture
def small_dataset() -> Dataset:
    return _random_dataset(40, 3, seed=11)


@pytest.fixture
def small_forest(small_dataset):
    return _fit(small_dataset, num_trees=120, master_seed=5)
