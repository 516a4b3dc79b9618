# rfvar/oob.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import sparse

from rfvar.data_feed import Dataset
from rfvar.errors import CoverageError, EstimationError
from rfvar.forest import Forest
from rfvar.tree import Tree

logger = logging.getLogger(__name__)

# rows above this size are never densified
DENSE_LIMIT = 2000
MAX_UNCOVERED_FRACTION = 0.20


@dataclass(frozen=True)
class OOBCoverage:
    """Z_i = number of trees with row i out-of-bag, plus the binomial p_n."""

    z_counts: np.ndarray
    p_n_theoretical: float
    num_trees: int

    @property
    def uncovered(self) -> np.ndarray:
        return np.flatnonzero(self.z_counts == 0)

    @property
    def covered(self) -> np.ndarray:
        return self.z_counts > 0

    @property
    def n_covered(self) -> int:
        return int(np.count_nonzero(self.z_counts))

    def empirical_rate(self) -> float:
        """mean_i(Z_i) / M."""
        return float(np.mean(self.z_counts) / self.num_trees)


def theoretical_oob_probability(n: int, subsample_size: int, with_replacement: bool) -> float:
    """
    P(row is out-of-bag in one tree):
      without replacement: 1 - a_n/n
      with replacement:    (1 - 1/n)^a_n   (the usual (1 - 1/n)^n when a_n = n)
    """
    if with_replacement:
        return float((1.0 - 1.0 / n) ** subsample_size)
    return 1.0 - subsample_size / n


def oob_coverage(forest: Forest, n: Optional[int] = None) -> OOBCoverage:
    n = forest.n_rows if n is None else n
    z = np.zeros(n, dtype=np.int64)
    for tree in forest.trees:
        z += tree.inbag_counts(n) == 0
    p_n = theoretical_oob_probability(n, forest.subsample_size, forest.config.with_replacement)
    return OOBCoverage(z_counts=z, p_n_theoretical=p_n, num_trees=forest.num_trees)


def check_coverage(coverage: OOBCoverage) -> None:
    """Uncovered rows are tolerated up to 20%; fewer than 2 covered rows is always fatal."""
    n = coverage.z_counts.size
    n_unc = n - coverage.n_covered
    if coverage.n_covered < 2:
        raise EstimationError(f"only {coverage.n_covered} row(s) have an out-of-bag tree; need at least 2")
    if n_unc > MAX_UNCOVERED_FRACTION * n:
        raise CoverageError(
            f"{n_unc} of {n} rows have no out-of-bag tree (> {MAX_UNCOVERED_FRACTION:.0%}); "
            "increase num_trees or lower subsample_size"
        )
    if n_unc:
        logger.warning("⚠️ %d of %d rows uncovered (Z_i = 0); excluded from residual sums", n_unc, n)


# -----------------------------
# Traversal path
# -----------------------------
def oob_predictions(forest: Forest, dataset: Dataset) -> np.ndarray:
    """
    OOB prediction of every training row: the mean over the trees that did
    not draw the row. NaN marks uncovered rows.
    """
    n = dataset.n
    total = np.zeros(n)
    z = np.zeros(n, dtype=np.int64)
    for tree in forest.trees:
        rows = np.flatnonzero(tree.inbag_counts(n) == 0)
        if rows.size == 0:
            continue
        total[rows] += tree.predict(dataset.features[rows])
        z[rows] += 1

    out = np.full(n, np.nan)
    covered = z > 0
    out[covered] = total[covered] / z[covered]
    return out


def oob_predict_traversal(forest: Forest, dataset: Dataset, i: int) -> Optional[float]:
    """OOB prediction of row i, or None when no tree has i out-of-bag."""
    if not 0 <= i < dataset.n:
        raise IndexError(f"row {i} out of range [0, {dataset.n})")
    x = dataset.features[i : i + 1]
    preds = [tree.predict(x)[0] for tree in forest.trees if i not in tree.inbag]
    if not preds:
        return None
    return float(np.mean(preds))


# -----------------------------
# Weight form
# -----------------------------
@dataclass(frozen=True)
class OOBWeightMatrix:
    """
    Row i holds W_ij: the average over i's OOB trees of (multiplicity of j
    in i's leaf) / N_leaf. Covered rows sum to one; uncovered rows are empty.
    """

    matrix: sparse.csr_matrix
    covered: np.ndarray
    z_counts: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dot(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ np.asarray(v, dtype=np.float64)).ravel()

    def row(self, i: int) -> dict[int, float]:
        start, end = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return {int(j): float(w) for j, w in zip(self.matrix.indices[start:end], self.matrix.data[start:end])}

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def squared_row_sums(self) -> np.ndarray:
        """sum_j W_ij^2 per row."""
        return np.asarray(self.matrix.multiply(self.matrix).sum(axis=1)).ravel()

    def dense(self) -> np.ndarray:
        if self.n > DENSE_LIMIT:
            raise ValueError(f"dense weight matrix refused for n={self.n} > {DENSE_LIMIT}")
        return self.matrix.toarray()

    def to_frame(self) -> pd.DataFrame:
        coo = self.matrix.tocoo()
        df = pd.DataFrame({"i": coo.row, "j": coo.col, "weight": coo.data})
        return df.sort_values(["i", "j"], kind="stable").reset_index(drop=True)

    def to_csv(self, path: str | Path) -> None:
        """3-column (i, j, weight) export, ascending (i, j)."""
        self.to_frame().to_csv(path, index=False)
        logger.info("weight matrix written to %s (%d entries)", path, self.matrix.nnz)


def tree_leaf_matrix(tree: Tree, n: int) -> sparse.csr_matrix:
    """(n_nodes x n) matrix whose leaf rows hold multiplicity / N_leaf over in-bag members."""
    rows, cols, vals = [], [], []
    for leaf in tree.leaf_ids:
        members, weights = tree.leaf_weights(leaf)
        rows.append(np.full(members.size, leaf, dtype=np.intp))
        cols.append(members)
        vals.append(weights)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(tree.n_nodes, n),
    )


def tree_weights(tree: Tree, X: np.ndarray, n: int) -> sparse.csr_matrix:
    """Per-tree weight rows for query points X: row q = leaf-membership weights of X[q]'s leaf."""
    leaves = tree.apply(X)
    route = sparse.csr_matrix(
        (np.ones(leaves.size), (np.arange(leaves.size), leaves)),
        shape=(leaves.size, tree.n_nodes),
    )
    return (route @ tree_leaf_matrix(tree, n)).tocsr()


def tree_oob_weights(tree: Tree, X: np.ndarray) -> tuple[np.ndarray, sparse.coo_matrix]:
    """(OOB rows, their per-tree weight rows) for one tree over the training matrix X."""
    n = X.shape[0]
    rows = np.flatnonzero(tree.inbag_counts(n) == 0)
    if rows.size == 0:
        return rows, sparse.coo_matrix((0, n))
    return rows, tree_weights(tree, X[rows], n).tocoo()


def _oob_triplets(tree: Tree, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, w = tree_oob_weights(tree, X)
    return rows[w.row], w.col, w.data


def oob_weight_matrix(forest: Forest, dataset: Dataset, threads: int = 1) -> OOBWeightMatrix:
    """
    Assemble W from per-tree rows. Triplets are concatenated in tree order
    and summed in that order, so the result does not depend on `threads`.
    """
    n = dataset.n
    parts = Parallel(n_jobs=threads)(delayed(_oob_triplets)(t, dataset.features) for t in forest.trees)

    if parts:
        r = np.concatenate([p[0] for p in parts])
        c = np.concatenate([p[1] for p in parts])
        v = np.concatenate([p[2] for p in parts])
    else:
        r = c = np.zeros(0, dtype=np.intp)
        v = np.zeros(0)
    summed = sparse.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()
    summed.sum_duplicates()

    z = oob_coverage(forest, n).z_counts
    covered = z > 0
    scale = np.zeros(n)
    scale[covered] = 1.0 / z[covered]
    matrix = (sparse.diags(scale) @ summed).tocsr()
    matrix.sort_indices()
    return OOBWeightMatrix(matrix=matrix, covered=covered, z_counts=z)


def in_bag_weights(forest: Forest, X: np.ndarray) -> sparse.csr_matrix:
    """All-tree weights for arbitrary query points: predict_many(forest, X) == W @ y."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    acc = sparse.csr_matrix((X.shape[0], forest.n_rows))
    for tree in forest.trees:
        acc = acc + tree_weights(tree, X, forest.n_rows)
    return (acc / forest.num_trees).tocsr()
