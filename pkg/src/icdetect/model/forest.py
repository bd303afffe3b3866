"""Random forest of Gini trees storing the IC proportion in every node."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 16
    min_samples_split: int = 2
    max_features: Optional[Union[int, str]] = "sqrt"
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def features_per_split(self, d: int) -> int:
        if self.max_features is None:
            return d
        if self.max_features == "sqrt":
            return max(1, math.ceil(math.sqrt(d)))
        return max(1, min(d, int(self.max_features)))


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64, go left when x[feature] <= threshold
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    value: np.ndarray      # float64, IC proportion of the node's samples

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return self.value[node]


def _best_split(Xn: np.ndarray, yn: np.ndarray, k: int, rng: np.random.Generator):
    """Lowest weighted Gini over a random feature subset of size k.

    If none of the first k features can split the node, the remaining features
    are tried in the same random order until one can.
    """
    n = len(yn)
    pos = yn.sum()
    order = rng.permutation(Xn.shape[1])
    best = None  # (impurity, feature, threshold)
    for rank, f in enumerate(order):
        if rank >= k and best is not None:
            break
        xs = Xn[:, f]
        o = np.argsort(xs, kind="stable")
        xs_s, ys_s = xs[o], yn[o]
        valid = np.nonzero(xs_s[:-1] < xs_s[1:])[0]
        if len(valid) == 0:
            continue
        cum = np.cumsum(ys_s)[valid]
        n_left = valid + 1.0
        n_right = n - n_left
        pos_right = pos - cum
        imp = cum * (n_left - cum) / n_left + pos_right * (n_right - pos_right) / n_right
        j = int(np.argmin(imp))
        if best is None or imp[j] < best[0]:
            i = valid[j]
            lo, hi = xs_s[i], xs_s[i + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = (imp[j], int(f), float(thr))
    return best


def build_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n, d = X.shape
    if cfg.bootstrap:
        idx = rng.integers(0, n, n)
    else:
        idx = np.arange(n)
    k = cfg.features_per_split(d)
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(ids: np.ndarray, depth: int) -> int:
        node = len(feature)
        yv = y[ids]
        pos = float(yv.sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(pos / len(ids))
        if depth >= cfg.max_depth or len(ids) < cfg.min_samples_split or pos in (0.0, len(ids)):
            return node
        split = _best_split(X[ids], yv, k, rng)
        if split is None:
            return node
        _, f, thr = split
        go_left = X[ids, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(ids[go_left], depth + 1)
        right[node] = grow(ids[~go_left], depth + 1)
        return node

    grow(idx, 0)
    return Tree(np.asarray(feature, dtype=np.int32), np.asarray(threshold, dtype=np.float64),
                np.asarray(left, dtype=np.int32), np.asarray(right, dtype=np.int32),
                np.asarray(value, dtype=np.float64))


@dataclass
class ForestModel:
    trees: list
    n_features: int
    config: ForestConfig
    seed: int

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) features, got {X.shape}")
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def train_forest(features, labels, cfg: ForestConfig = ForestConfig(), seed: int = 0,
                 workers: int = 1) -> ForestModel:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyInput("need at least one sample with a 2-D feature matrix")
    if len(y) != len(X):
        raise ValueError("features and labels differ in length")

    def job(i):
        return build_tree(X, y, cfg, tree_rng(seed, i))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(job, range(cfg.n_trees)))
    else:
        trees = [job(i) for i in range(cfg.n_trees)]
    return ForestModel(trees, X.shape[1], cfg, int(seed))
