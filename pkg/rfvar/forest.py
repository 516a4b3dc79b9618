# rfvar/forest.py
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from joblib import Parallel, delayed

from rfvar import jsonio
from rfvar.config import ForestConfig, validated
from rfvar.data_feed import Dataset
from rfvar.errors import InputError
from rfvar.tree import Tree, build_tree

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def derive_tree_seed(master_seed: int, tree_index: int) -> int:
    """64-bit seed of tree `tree_index`; a pure function of (master_seed, tree_index)."""
    ss = np.random.SeedSequence([int(master_seed), int(tree_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class Forest:
    trees: tuple[Tree, ...]
    config: ForestConfig
    n_rows: int
    n_features: int

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def subsample_size(self) -> int:
        return self.config.subsample_size


def build_forest(dataset: Dataset, config: ForestConfig, threads: int = 1) -> Forest:
    """
    Fit M trees. Tree j uses derive_tree_seed(master_seed, j) and trees are
    collected in index order, so the result does not depend on `threads`.
    """
    config.check_against(dataset.n, dataset.p)
    seeds = [derive_tree_seed(config.master_seed, j) for j in range(config.num_trees)]

    t0 = time.perf_counter()
    trees = Parallel(n_jobs=threads)(delayed(build_tree)(dataset, config, s) for s in seeds)
    forest = Forest(tuple(trees), config, dataset.n, dataset.p)

    logger.info(
        "✅ forest built: M=%d a_n=%d t_n=%d mtry=%d (%.2fs, threads=%d)",
        config.num_trees,
        config.subsample_size,
        config.max_leaves,
        config.mtry,
        time.perf_counter() - t0,
        threads,
    )
    return forest


def predict_many(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Finite-forest estimate (1/M) sum_j m_n(x; Theta_j) for every row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise InputError(f"expected {forest.n_features} features, got {X.shape[1]}")
    acc = np.zeros(X.shape[0])
    for tree in forest.trees:
        acc += tree.predict(X)
    return acc / forest.num_trees


def predict(forest: Forest, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise InputError("query point has non-finite coordinates")
    return float(predict_many(forest, x)[0])


# -----------------------------
# JSON round trip
# -----------------------------
def _tree_to_dict(tree: Tree) -> dict[str, Any]:
    nodes = []
    for k in range(tree.n_nodes):
        if tree.feature[k] >= 0:
            nodes.append({
                "feature": int(tree.feature[k]),
                "threshold": float(tree.threshold[k]),
                "left": int(tree.left[k]),
                "right": int(tree.right[k]),
                "count": int(tree.count[k]),
            })
        else:
            nodes.append({
                "value": float(tree.value[k]),
                "count": int(tree.count[k]),
                "inbag_members": [int(i) for i in tree.members[k]],
            })
    return {"seed": tree.tree_seed, "inbag": [int(i) for i in tree.inbag], "nodes": nodes}


def _tree_from_dict(d: dict[str, Any]) -> Tree:
    feature, threshold, left, right, value, count, members = [], [], [], [], [], [], []
    for node in d["nodes"]:
        count.append(int(node["count"]))
        if "feature" in node:
            feature.append(int(node["feature"]))
            threshold.append(float(node["threshold"]))
            left.append(int(node["left"]))
            right.append(int(node["right"]))
            value.append(np.nan)
            members.append(None)
        else:
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            value.append(float(node["value"]))
            members.append(np.asarray(node["inbag_members"], dtype=np.intp))
    return Tree(feature, threshold, left, right, value, count, members, d["inbag"], int(d["seed"]))


def forest_to_dict(forest: Forest) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "config": forest.config.model_dump(),
        "n_rows": forest.n_rows,
        "n_features": forest.n_features,
        "trees": [_tree_to_dict(t) for t in forest.trees],
    }


def forest_from_dict(d: dict[str, Any]) -> Forest:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported forest format_version {version!r} (expected {FORMAT_VERSION})")
    config = validated(ForestConfig, d["config"])
    trees = tuple(_tree_from_dict(t) for t in d["trees"])
    return Forest(trees, config, int(d["n_rows"]), int(d["n_features"]))


def dumps_forest(forest: Forest) -> str:
    return jsonio.dumps(forest_to_dict(forest), separators=(",", ":"))


def save_forest(forest: Forest, path: str | Path) -> None:
    Path(path).write_text(dumps_forest(forest), encoding="utf-8")
    logger.info("forest written to %s", path)


def load_forest(path: str | Path) -> Forest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read forest JSON {path}: {e}")
    return forest_from_dict(data)
