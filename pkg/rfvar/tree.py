# rfvar/tree.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from rfvar.config import ForestConfig
from rfvar.data_feed import Dataset
from rfvar.errors import ConfigError
from rfvar.splitting import best_cut, is_constant

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Node:
    """
    A cell of the partition. Leaves carry `value` and `inbag_members`
    (dataset row indices with multiplicity); internal nodes carry the cut.
    x goes left iff x[feature] < threshold.
    """

    count: int
    value: float = float("nan")
    inbag_members: Optional[np.ndarray] = None
    feature: int = -1
    threshold: float = float("nan")
    left: Optional["Node"] = None
    right: Optional["Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _streams(tree_seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (subsample, feature-subset) generators for one tree."""
    sample_ss, feature_ss = np.random.SeedSequence(int(tree_seed)).spawn(2)
    return np.random.default_rng(sample_ss), np.random.default_rng(feature_ss)


def _cell_mean(y: np.ndarray) -> float:
    # exact for constant cells, where np.mean can be one ulp off
    if is_constant(y):
        return float(y[0])
    return float(np.mean(y))


def _leaf(members: np.ndarray, y: np.ndarray) -> Node:
    return Node(count=int(members.size), value=_cell_mean(y[members]), inbag_members=members)


def draw_subsample(n: int, config: ForestConfig, tree_seed: int) -> np.ndarray:
    """
    Sorted in-bag row indices (a multiset of size a_n).
    Deterministic given tree_seed.
    """
    a_n = config.subsample_size
    if not config.with_replacement and a_n > n:
        raise ConfigError(f"subsample_size ({a_n}) exceeds n ({n}) under sampling without replacement")

    rng, _ = _streams(tree_seed)
    if config.with_replacement:
        drawn = rng.integers(0, n, size=a_n)
    else:
        drawn = rng.choice(n, size=a_n, replace=False)
    return np.sort(drawn).astype(np.intp)


class Tree:
    """
    A fitted regression tree stored as preorder arrays.
    feature[k] == -1 marks a leaf; left/right are child node indices (-1 on leaves).
    """

    def __init__(
        self,
        feature: np.ndarray,
        threshold: np.ndarray,
        left: np.ndarray,
        right: np.ndarray,
        value: np.ndarray,
        count: np.ndarray,
        members: list[Optional[np.ndarray]],
        inbag: np.ndarray,
        tree_seed: int,
    ):
        self.feature = np.asarray(feature, dtype=np.intp)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.intp)
        self.right = np.asarray(right, dtype=np.intp)
        self.value = np.asarray(value, dtype=np.float64)
        self.count = np.asarray(count, dtype=np.intp)
        self.members = list(members)
        self.inbag = np.asarray(inbag, dtype=np.intp)
        self.tree_seed = int(tree_seed)
        for arr in (self.feature, self.threshold, self.left, self.right, self.value, self.count, self.inbag):
            arr.setflags(write=False)

    @classmethod
    def from_root(cls, root: Node, inbag: np.ndarray, tree_seed: int) -> "Tree":
        feature, threshold, left, right, value, count, members = [], [], [], [], [], [], []

        # iterative preorder; deep unbalanced trees exceed the recursion limit
        stack: list[tuple[Node, int, str]] = [(root, -1, "")]
        while stack:
            node, parent, side = stack.pop()
            idx = len(feature)
            if parent >= 0:
                (left if side == "L" else right)[parent] = idx

            feature.append(node.feature if not node.is_leaf else -1)
            threshold.append(node.threshold)
            left.append(-1)
            right.append(-1)
            value.append(node.value)
            count.append(node.count)
            members.append(node.inbag_members if node.is_leaf else None)

            if not node.is_leaf:
                stack.append((node.right, idx, "R"))
                stack.append((node.left, idx, "L"))

        return cls(feature, threshold, left, right, value, count, members, inbag, tree_seed)

    # -----------------------------
    # Structure
    # -----------------------------
    @cached_property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_ids.size)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @cached_property
    def root(self) -> Node:
        """Linked Node view of the preorder arrays."""
        nodes = [
            Node(
                count=int(self.count[k]),
                value=float(self.value[k]),
                inbag_members=self.members[k],
                feature=int(self.feature[k]),
                threshold=float(self.threshold[k]),
            )
            for k in range(self.n_nodes)
        ]
        for k, node in enumerate(nodes):
            if self.feature[k] >= 0:
                node.left = nodes[self.left[k]]
                node.right = nodes[self.right[k]]
        return nodes[0]

    def inbag_counts(self, n: int) -> np.ndarray:
        """Multiplicity of every dataset row in this tree's subsample."""
        return np.bincount(self.inbag, minlength=n)

    def leaf_weights(self, leaf: int) -> tuple[np.ndarray, np.ndarray]:
        """(rows, weights) of one leaf: each in-bag member gets multiplicity / N_leaf."""
        rows, mult = np.unique(self.members[leaf], return_counts=True)
        return rows, mult / float(self.count[leaf])

    # -----------------------------
    # Prediction
    # -----------------------------
    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by every row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        idx = np.zeros(X.shape[0], dtype=np.intp)
        active = self.feature[idx] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nodes = idx[rows]
            go_left = X[rows, self.feature[nodes]] < self.threshold[nodes]
            idx[rows] = np.where(go_left, self.left[nodes], self.right[nodes])
            active[rows] = self.feature[idx[rows]] >= 0
        return idx

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def substituted_values(self, y: np.ndarray) -> np.ndarray:
        """Node values with every leaf mean recomputed from `y` over the same in-bag members."""
        out = np.full(self.n_nodes, np.nan)
        for leaf in self.leaf_ids:
            out[leaf] = np.mean(y[self.members[leaf]])
        return out


# -----------------------------
# Growth
# -----------------------------
def build_tree(dataset: Dataset, config: ForestConfig, tree_seed: int) -> Tree:
    """
    Grow one tree level by level: every cell at depth k is considered
    (left to right) before depth k+1. Each expansion attempt draws a fresh
    mtry-subset without replacement. Growth stops once the tree has
    max_leaves leaves or no cell admits a cut; response-constant cells
    are never split.
    """
    X = dataset.features
    y = dataset.response
    inbag = draw_subsample(dataset.n, config, tree_seed)
    _, feature_rng = _streams(tree_seed)

    min_leaf = config.min_leaf_size
    root = _leaf(inbag, y)
    level = [root]
    n_leaves = 1

    while level and n_leaves < config.max_leaves:
        next_level: list[Node] = []
        for node in level:
            if n_leaves >= config.max_leaves:
                break

            members = node.inbag_members
            y_cell = y[members]
            if members.size < 2 * min_leaf or is_constant(y_cell):
                continue

            subset = feature_rng.choice(dataset.p, size=config.mtry, replace=False)
            cut = best_cut(X[members], y_cell, subset, min_leaf)
            if cut is None:
                continue

            goes_left = X[members, cut.feature] < cut.threshold
            node.feature = cut.feature
            node.threshold = cut.threshold
            node.left = _leaf(members[goes_left], y)
            node.right = _leaf(members[~goes_left], y)
            node.inbag_members = None
            node.value = float("nan")

            n_leaves += 1
            next_level.extend((node.left, node.right))
        level = next_level

    tree = Tree.from_root(root, inbag, tree_seed)
    logger.debug("tree seed=%d leaves=%d nodes=%d", tree_seed, tree.n_leaves, tree.n_nodes)
    return tree
