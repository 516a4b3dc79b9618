# rfvar/variance.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict

from rfvar import jsonio
from rfvar.config import BootstrapConfig
from rfvar.data_feed import Dataset
from rfvar.errors import EstimationError
from rfvar.forest import Forest, predict_many
from rfvar.oob import OOBWeightMatrix, check_coverage, oob_coverage, oob_predictions, oob_weight_matrix

logger = logging.getLogger(__name__)

# zero-mean noise draws with the given standard deviation
NOISE_LAWS: dict[str, Callable[[np.random.Generator, float, int], np.ndarray]] = {
    "normal": lambda rng, sd, size: rng.normal(0.0, sd, size=size),
}


@dataclass(frozen=True)
class Residuals:
    rows: np.ndarray
    values: np.ndarray
    n_uncovered: int


class VarianceReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma2_rf: float
    sigma2_fast: float
    sigma2_boot_mc: Optional[float]
    sigma2_boot_closed: float
    r_hat_B: Optional[float]
    r_infinity: float
    lower_bound: float
    n_covered: int
    B: int
    ordering_ok: bool
    clamped_boot: float
    warnings: list[str]

    def to_json(self) -> str:
        return jsonio.dumps(self.model_dump(), indent=2)


@dataclass(frozen=True)
class BootstrapEstimate:
    """R_hat_B plus the per-replicate means it averages (for the MC standard error)."""

    value: float
    terms: np.ndarray

    @property
    def standard_error(self) -> float:
        if self.terms.size < 2:
            return float("nan")
        return float(np.std(self.terms, ddof=1) / np.sqrt(self.terms.size))


# -----------------------------
# OOB residual variance
# -----------------------------
def oob_residuals(dataset: Dataset, oob_pred: np.ndarray) -> Residuals:
    """eps_i = Y_i - m_oob(X_i) over covered rows (NaN predictions are uncovered)."""
    oob_pred = np.asarray(oob_pred, dtype=np.float64)
    covered = np.isfinite(oob_pred)
    rows = np.flatnonzero(covered)
    if rows.size < 2:
        raise EstimationError(f"need at least 2 covered rows for a residual variance, got {rows.size}")
    return Residuals(
        rows=rows,
        values=dataset.response[rows] - oob_pred[rows],
        n_uncovered=int(dataset.n - rows.size),
    )


def sigma2_rf(residuals: Residuals | np.ndarray) -> float:
    """Mean-centred residual variance with divisor n_covered."""
    r = residuals.values if isinstance(residuals, Residuals) else np.asarray(residuals, dtype=np.float64)
    if r.size < 2:
        raise EstimationError(f"need at least 2 residuals, got {r.size}")
    if np.all(r == r[0]):
        return 0.0
    return float(np.mean((r - r.mean()) ** 2))


def fast_factor(a_n: int) -> float:
    return 1.0 - 1.0 / (a_n * a_n)


# -----------------------------
# Parametric bootstrap
# -----------------------------
def bootstrap_base(forest: Forest, dataset: Dataset, m_oob: np.ndarray) -> np.ndarray:
    """
    m_oob with uncovered rows filled by the all-tree prediction, so that
    Y* = base + eps* is defined for every row that can be a leaf member.
    """
    base = np.array(m_oob, dtype=np.float64)
    missing = ~np.isfinite(base)
    if missing.any():
        base[missing] = predict_many(forest, dataset.features[missing])
    return base


def _check_vectors(weights: OOBWeightMatrix, *vectors: np.ndarray) -> None:
    for v in vectors:
        if v.shape != (weights.n,):
            raise ValueError(f"vector of shape {v.shape} does not match weight matrix of size {weights.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("bootstrap vectors must be finite (fill uncovered rows with bootstrap_base)")


def bootstrap_refit(weights: OOBWeightMatrix, m_oob: np.ndarray, y_star: np.ndarray) -> np.ndarray:
    """
    m*_oob = W y*: leaf values replaced by the mean of Y* over the same in-bag
    members, averaged over each row's OOB trees. Uncovered rows are NaN.
    """
    m_oob = np.asarray(m_oob, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    _check_vectors(weights, m_oob, y_star)
    out = weights.dot(y_star)
    out[~weights.covered] = np.nan
    return out


def refit_by_substitution(forest: Forest, dataset: Dataset, y_star: np.ndarray) -> np.ndarray:
    """Tree-by-tree terminal node substitution; must agree with bootstrap_refit."""
    y_star = np.asarray(y_star, dtype=np.float64)
    n = dataset.n
    total = np.zeros(n)
    z = np.zeros(n, dtype=np.int64)
    for tree in forest.trees:
        rows = np.flatnonzero(tree.inbag_counts(n) == 0)
        if rows.size == 0:
            continue
        values = tree.substituted_values(y_star)
        total[rows] += values[tree.apply(dataset.features[rows])]
        z[rows] += 1
    out = np.full(n, np.nan)
    covered = z > 0
    out[covered] = total[covered] / z[covered]
    return out


def _replicate_terms(
    weights: OOBWeightMatrix,
    base: np.ndarray,
    covered: np.ndarray,
    sd: float,
    noise: str,
    seed: int,
    replicates: range,
) -> np.ndarray:
    draw = NOISE_LAWS[noise]
    terms = np.empty(len(replicates))
    for k, b in enumerate(replicates):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        y_star = base + draw(rng, sd, base.size)
        pert = weights.dot(y_star)[covered] - base[covered]
        terms[k] = np.mean(pert * pert)
    return terms


def r_hat_B(
    weights: OOBWeightMatrix,
    m_oob: np.ndarray,
    sigma2: float,
    config: BootstrapConfig,
    covered: Optional[np.ndarray] = None,
    threads: int = 1,
) -> BootstrapEstimate:
    """
    Monte-Carlo correction (1/(n_cov B)) sum_b sum_i (m*_b(X_i) - m_oob(X_i))^2.
    Replicate b draws eps* from (bootstrap_seed, b); replicates are reduced
    in b order whatever the thread count. `m_oob` must be finite everywhere
    (see bootstrap_base); sums run over `covered` rows only.
    """
    base = np.asarray(m_oob, dtype=np.float64)
    _check_vectors(weights, base)
    covered = weights.covered if covered is None else np.asarray(covered, dtype=bool)
    if covered.sum() == 0:
        raise EstimationError("no covered rows for the bootstrap correction")

    sd = float(np.sqrt(max(sigma2, 0.0)))
    chunks = [r for r in np.array_split(np.arange(config.B), min(threads, config.B)) if r.size]
    parts = Parallel(n_jobs=threads)(
        delayed(_replicate_terms)(
            weights, base, covered, sd, config.noise, config.bootstrap_seed, range(int(c[0]), int(c[-1]) + 1)
        )
        for c in chunks
    )
    terms = np.concatenate(parts)
    return BootstrapEstimate(value=float(np.mean(terms)), terms=terms)


def r_infinity(
    weights: OOBWeightMatrix,
    m_oob: np.ndarray,
    sigma2: float,
    covered: Optional[np.ndarray] = None,
) -> float:
    """
    B -> infinity limit of r_hat_B given the data:
      mean over covered i of ((W m)_i - m_i)^2 + sigma2 * sum_j W_ij^2
    """
    m = np.asarray(m_oob, dtype=np.float64)
    _check_vectors(weights, m)
    covered = weights.covered if covered is None else np.asarray(covered, dtype=bool)
    bias = (weights.dot(m) - m)[covered]
    spread = weights.squared_row_sums()[covered]
    return float(np.mean(bias * bias + sigma2 * spread))


# -----------------------------
# All estimators
# -----------------------------
def estimate_all(
    forest: Forest,
    dataset: Dataset,
    boot_config: Optional[BootstrapConfig] = None,
    threads: int = 1,
) -> VarianceReport:
    """
    sigma2_rf, the fast correction sigma2_rf (1 - 1/a_n^2), the closed-form
    bootstrap correction and, when boot_config is given, the Monte-Carlo one.
    """
    coverage = oob_coverage(forest, dataset.n)
    check_coverage(coverage)

    m_oob = oob_predictions(forest, dataset)
    residuals = oob_residuals(dataset, m_oob)
    s2 = sigma2_rf(residuals)

    a_n = forest.subsample_size
    s2_fast = s2 * fast_factor(a_n)
    lower = s2 / (a_n * a_n)

    weights = oob_weight_matrix(forest, dataset, threads=threads)
    base = bootstrap_base(forest, dataset, m_oob)
    covered = coverage.covered

    r_inf = r_infinity(weights, base, s2, covered)
    s2_closed = s2 - r_inf

    r_hat = s2_mc = None
    if boot_config is not None:
        est = r_hat_B(weights, base, s2, boot_config, covered, threads=threads)
        r_hat = est.value
        s2_mc = s2 - r_hat

    warnings: list[str] = []
    if residuals.n_uncovered:
        warnings.append(f"{residuals.n_uncovered} uncovered row(s) excluded")
    if s2_closed < 0:
        warnings.append("sigma2_boot_closed is negative")
    if s2_mc is not None and s2_mc < 0:
        warnings.append("sigma2_boot_mc is negative")

    if lower > 0:
        ratio = r_inf / lower
        logger.info("bound ratio r_infinity / (sigma2_rf / a_n^2) = %.6g", ratio)
        if ratio < 1.0:
            warnings.append(f"r_infinity below sigma2_rf/a_n^2 (ratio {ratio:.6g})")
            if a_n * a_n >= dataset.n:
                logger.error("bound violated although a_n^2 >= n (ratio %.6g)", ratio)

    for w in warnings:
        logger.warning("⚠️ %s", w)

    return VarianceReport(
        sigma2_rf=s2,
        sigma2_fast=s2_fast,
        sigma2_boot_mc=s2_mc,
        sigma2_boot_closed=s2_closed,
        r_hat_B=r_hat,
        r_infinity=r_inf,
        lower_bound=lower,
        n_covered=coverage.n_covered,
        B=0 if boot_config is None else boot_config.B,
        ordering_ok=bool(s2 >= s2_fast >= s2_closed),
        clamped_boot=max(0.0, s2_closed),
        warnings=warnings,
    )
