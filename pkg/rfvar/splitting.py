# rfvar/splitting.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

# gains within this relative distance count as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SplitCandidate:
    """A cut (feature, threshold) and its variance reduction L_n."""

    feature: int
    threshold: float
    criterion: float


# -----------------------------
# Helpers
# -----------------------------
def _column(x: np.ndarray, feature: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, feature] if x.ndim == 2 else x


def _midpoint(lo: float, hi: float) -> float:
    """Midpoint of two consecutive distinct values, never equal to `lo`."""
    z = (lo + hi) / 2.0
    if not lo < z:
        # lo and hi are adjacent doubles
        z = hi
    return float(z)


def is_constant(y: np.ndarray) -> bool:
    return bool(np.all(y == y[0]))


# -----------------------------
# L_n criterion
# -----------------------------
def evaluate_cut(
    x: np.ndarray,
    y: np.ndarray,
    feature: int,
    threshold: float,
    min_leaf_size: int = 1,
) -> Optional[float]:
    """
    L_n(j, z) for one cell: mean squared deviation of the cell minus the
    mean squared deviation around the two child means, both divided by N.
    x goes left iff x[feature] < threshold. Returns None when either child
    would hold fewer than max(1, min_leaf_size) points.
    """
    y = np.asarray(y, dtype=np.float64)
    n_cell = y.shape[0]
    if n_cell == 0:
        raise ValueError("evaluate_cut on an empty cell")
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")

    left = _column(x, feature) < threshold
    n_left = int(left.sum())
    n_right = n_cell - n_left
    need = max(1, min_leaf_size)
    if n_left < need or n_right < need:
        return None

    y_left = y[left]
    y_right = y[~left]
    parent = np.sum((y - y.mean()) ** 2) / n_cell
    children = (np.sum((y_left - y_left.mean()) ** 2) + np.sum((y_right - y_right.mean()) ** 2)) / n_cell
    return float(parent - children)


def best_cut(
    x: np.ndarray,
    y: np.ndarray,
    feature_subset: Iterable[int],
    min_leaf_size: int = 1,
) -> Optional[SplitCandidate]:
    """
    Best admissible cut over the features in `feature_subset`.

    Candidates are midpoints between consecutive distinct sorted values of
    each feature. The reduction is computed in its between-groups form
    N_L (mean_L - mean)^2 + N_R (mean_R - mean)^2, divided by N, so it is
    never negative. Ties go to the lowest feature, then the lowest threshold.
    Returns None for response-constant cells or when nothing is admissible.
    """
    features = sorted(set(int(j) for j in feature_subset))
    if not features:
        raise ValueError("feature_subset must be nonempty")

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_cell = y.shape[0]
    need = max(1, min_leaf_size)
    if n_cell < 2 * need or is_constant(y):
        return None

    yc = y - y.mean()
    total = yc.sum()
    n_left = np.arange(1, n_cell, dtype=np.float64)
    n_right = n_cell - n_left
    size_ok = (n_left >= need) & (n_right >= need)

    best: Optional[SplitCandidate] = None
    for j in features:
        col = _column(x, j)
        order = np.argsort(col, kind="stable")
        xs = col[order]

        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue

        s_left = np.cumsum(yc[order])[:-1]
        s_right = total - s_left
        gain = (s_left * s_left / n_left + s_right * s_right / n_right) / n_cell
        gain = np.where(valid, gain, -np.inf)

        top = gain.max()
        if top <= 0.0:
            continue
        # equal partitions reached through different features (or orders) may differ by an ulp
        tol = TIE_RTOL * top
        k = int(np.flatnonzero(gain >= top - tol)[0])
        if best is None or gain[k] > best.criterion + tol:
            best = SplitCandidate(j, _midpoint(xs[k], xs[k + 1]), float(gain[k]))

    return best
