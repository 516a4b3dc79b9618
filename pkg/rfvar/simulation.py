# rfvar/simulation.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from rfvar.data_feed import Dataset
from rfvar.errors import ConfigError


class Component(BaseModel):
    """Univariate additive term m_j on [0, 1]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["zero", "linear", "sine", "quadratic"]
    slope: float = 1.0  # linear
    freq: float = 1.0   # sine: amp * sin(2 pi freq x)
    amp: float = 1.0
    coef: float = 1.0   # quadratic: coef * x^2

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "linear":
            return self.slope * x
        if self.kind == "sine":
            return self.amp * np.sin(2.0 * np.pi * self.freq * x)
        if self.kind == "quadratic":
            return self.coef * x * x
        return np.zeros_like(x)


class SimulationModel(BaseModel):
    """Y = sum_j m_j(X_j) + eps, X ~ Uniform[0,1]^p, eps ~ Normal(0, sigma^2)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    components: list[Component] = Field(min_length=1)
    sigma: float = Field(default=1.0, ge=0.0)
    x_law: Literal["uniform"] = "uniform"

    @property
    def p(self) -> int:
        return len(self.components)

    @property
    def sigma2(self) -> float:
        return self.sigma * self.sigma

    def regression(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros(X.shape[0])
        for j, comp in enumerate(self.components):
            out += comp(X[:, j])
        return out


def canonical_model(sigma: float = 1.0) -> SimulationModel:
    """4 sin(2 pi x1) + 2 x2^2 + x3, two pure-noise features."""
    return SimulationModel(
        components=[
            Component(kind="sine", freq=1.0, amp=4.0),
            Component(kind="quadratic", coef=2.0),
            Component(kind="linear", slope=1.0),
            Component(kind="zero"),
            Component(kind="zero"),
        ],
        sigma=sigma,
    )


def named_model(name: str, p: int = 5, sigma: float = 1.0) -> SimulationModel:
    if p < 1:
        raise ConfigError(f"p must be >= 1, got {p}")
    if name == "canonical":
        return canonical_model(sigma)
    if name == "zero":
        return SimulationModel(components=[Component(kind="zero")] * p, sigma=sigma)
    if name == "linear":
        return SimulationModel(components=[Component(kind="linear")] * p, sigma=sigma)
    raise ConfigError(f"unknown model '{name}' (expected zero, linear or canonical)")


@dataclass(frozen=True)
class SimulatedData:
    dataset: Dataset
    m_values: np.ndarray
    sigma2: float


def generate_dataset(model: SimulationModel, n: int, seed: int) -> SimulatedData:
    """Draw n points from the model; the noiseless m(X_i) are kept alongside."""
    if n < 2:
        raise ConfigError(f"n must be >= 2, got {n}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, model.p))
    m = model.regression(X)
    eps = rng.normal(0.0, model.sigma, size=n)
    ds = Dataset(X, m + eps, tuple(f"x{j + 1}" for j in range(model.p)))
    return SimulatedData(dataset=ds, m_values=m, sigma2=model.sigma2)
