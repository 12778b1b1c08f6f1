"""CART regression trees and a bootstrap random forest.

Split search works on per-feature rank codes, so each node costs a few bincounts
per candidate feature instead of a sort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 200
    max_depth: int = 12
    min_leaf: int = 5
    mtry: int | None = None  # None: ceil(d / 3)
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("n_trees, max_depth and min_leaf must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")

    def resolved_mtry(self, d: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(d / 3)
        if m > d:
            raise ValueError(f"mtry={m} exceeds the {d} available features")
        return m


@dataclass
class _Tree:
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def freeze(self):
        self.feature = np.asarray(self.feature)
        self.threshold = np.asarray(self.threshold)
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        self.value = np.asarray(self.value)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])


def _best_split(codes, levels, y, features, min_leaf):
    """Lowest total child SSE over the given features; None if no legal split."""
    best = None
    ybar = y.mean()
    yc = y - ybar
    for f in features:
        c = codes[:, f]
        k = levels[f].size
        cnt = np.bincount(c, minlength=k)
        present = np.flatnonzero(cnt)
        if present.size < 2:
            continue
        s1 = np.bincount(c, weights=yc, minlength=k)[present]
        s2 = np.bincount(c, weights=yc * yc, minlength=k)[present]
        n = cnt[present]
        nl, sl, ql = np.cumsum(n)[:-1], np.cumsum(s1)[:-1], np.cumsum(s2)[:-1]
        nr, sr, qr = n.sum() - nl, s1.sum() - sl, s2.sum() - ql
        ok = (nl >= min_leaf) & (nr >= min_leaf)
        if not ok.any():
            continue
        sse = (ql - sl * sl / nl) + (qr - sr * sr / nr)
        sse = np.where(ok, sse, np.inf)
        i = int(np.argmin(sse))
        if best is None or sse[i] < best[0] - 1e-12 * max(1.0, abs(best[0])):
            thr = (levels[f][present[i]] + levels[f][present[i + 1]]) / 2.0
            best = (float(sse[i]), f, thr, present[i])
    return best


def _grow(X, codes, levels, y, cfg: RfConfig, mtry: int, rng: np.random.Generator) -> _Tree:
    tree = _Tree()
    root = tree.add(float(y.mean()))
    stack = [(root, np.arange(len(y)), 0)]
    d = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        yy = y[idx]
        if depth >= cfg.max_depth or idx.size < 2 * cfg.min_leaf or np.ptp(yy) == 0:
            continue
        feats = rng.choice(d, size=mtry, replace=False)
        split = _best_split(codes[idx], levels, yy, feats, cfg.min_leaf)
        if split is None:
            continue
        _, f, thr, cut = split
        mask = codes[idx, f] <= cut
        li, ri = idx[mask], idx[~mask]
        tree.feature[node], tree.threshold[node] = int(f), float(thr)
        tree.left[node] = tree.add(float(y[li].mean()))
        tree.right[node] = tree.add(float(y[ri].mean()))
        stack.append((tree.right[node], ri, depth + 1))
        stack.append((tree.left[node], li, depth + 1))
    return tree.freeze()


@dataclass
class RandomForest:
    trees: list[_Tree]
    n_features: int
    constant: float | None = None

    @property
    def degenerate(self) -> bool:
        """True when the training target was constant."""
        return self.constant is not None

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features")
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def fit_random_forest(features, target, cfg: RfConfig = RfConfig()) -> RandomForest:
    """Bootstrap-aggregated CART trees; ``mtry`` features are tried at each split."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features must be an n x d matrix matching the target length")
    if X.shape[0] < 10:
        raise ValueError("need at least 10 rows")
    if np.isnan(X).any() or np.isnan(y).any():
        raise ValueError("features and target must not contain NaN")
    d = X.shape[1]
    mtry = cfg.resolved_mtry(d)
    if np.ptp(y) == 0:
        return RandomForest([], d, constant=float(y[0]))

    levels, codes = [], np.empty(X.shape, dtype=np.int64)
    for j in range(d):
        lev, inv = np.unique(X[:, j], return_inverse=True)
        levels.append(lev)
        codes[:, j] = inv
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    trees = []
    n = len(y)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        boot = rng.integers(0, n, size=n)
        trees.append(_grow(X[boot], codes[boot], levels, y[boot], cfg, mtry, rng))
    return RandomForest(trees, d)
