"""Bagged CART trees with Gini impurity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def gini(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, n, out=np.zeros_like(counts, dtype=float), where=n > 0)
    return 1.0 - (p * p).sum(axis=-1)


@dataclass
class DecisionTree:
    n_classes: int
    max_features: int | None = None
    max_depth: int | None = None
    min_samples_leaf: int = 1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    feature: list = field(default_factory=list, repr=False)
    threshold: list = field(default_factory=list, repr=False)
    left: list = field(default_factory=list, repr=False)
    right: list = field(default_factory=list, repr=False)
    value: list = field(default_factory=list, repr=False)

    def _leaf(self, y: np.ndarray) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        # argmax picks the smallest class id on ties
        self.value.append(int(np.argmax(np.bincount(y, minlength=self.n_classes))))
        return len(self.feature) - 1

    def _best_split(self, X: np.ndarray, y: np.ndarray):
        n, F = X.shape
        m = F if self.max_features is None else min(self.max_features, F)
        feats = self.rng.choice(F, size=m, replace=False) if m < F else np.arange(F)
        Xs = X[:, feats]
        order = np.argsort(Xs, axis=0, kind="stable")
        xs = np.take_along_axis(Xs, order, axis=0)
        onehot = np.eye(self.n_classes)[y]
        left = np.cumsum(onehot[order], axis=0)[:-1]  # [n-1, m, K]
        total = onehot.sum(axis=0)
        right = total - left
        nl = np.arange(1, n)[:, None].astype(float)
        score = (nl * gini(left) + (n - nl) * gini(right)) / n
        valid = xs[1:] > xs[:-1]
        leaf = self.min_samples_leaf
        if leaf > 1:
            valid &= (nl >= leaf) & (n - nl >= leaf)
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf)
        pos, j = np.unravel_index(np.argmin(score), score.shape)
        thr = 0.5 * (xs[pos, j] + xs[pos + 1, j])
        return int(feats[j]), float(thr)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "DecisionTree":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        stack = [(np.arange(len(y)), 0, None, None)]
        while stack:
            idx, depth, parent, side = stack.pop()
            yi = y[idx]
            split = None
            if len(idx) >= 2 * self.min_samples_leaf and np.any(yi != yi[0]) and (self.max_depth is None or depth < self.max_depth):
                split = self._best_split(X[idx], yi)
            if split is None:
                node = self._leaf(yi)
            else:
                node = self._leaf(yi)
                self.feature[node], self.threshold[node] = split
                mask = X[idx, split[0]] <= split[1]
                stack.append((idx[~mask], depth + 1, node, "r"))
                stack.append((idx[mask], depth + 1, node, "l"))
            if parent is not None:
                (self.left if side == "l" else self.right)[parent] = node
        self._arrays = tuple(np.asarray(a) for a in (self.feature, self.threshold, self.left, self.right, self.value))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        feat, thr, lft, rgt, val = self._arrays
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = feat[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, feat[nd]] <= thr[nd]
            node[r] = np.where(go_left, lft[nd], rgt[nd])
            active = feat[node] >= 0
        return val[node]


@dataclass
class RandomForest:
    n_classes: int
    n_trees: int = 100
    max_features: str | int | None = "sqrt"
    max_depth: int | None = None
    min_samples_leaf: int = 1
    seed: int = 0
    trees: list = field(default_factory=list, repr=False)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RandomForest":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        F = X.shape[1]
        if self.max_features == "sqrt":
            mf = max(1, int(np.sqrt(F)))
        else:
            mf = self.max_features
        rng = np.random.default_rng(self.seed)
        self.trees = []
        for _ in range(self.n_trees):
            boot = rng.integers(0, len(y), size=len(y))
            tree = DecisionTree(self.n_classes, mf, self.max_depth, self.min_samples_leaf, rng=rng)
            self.trees.append(tree.fit(X[boot], y[boot]))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        votes = np.zeros((len(X), self.n_classes), dtype=np.int64)
        rows = np.arange(len(X))
        for t in self.trees:
            votes[rows, t.predict(X)] += 1
        return np.argmax(votes, axis=1)
