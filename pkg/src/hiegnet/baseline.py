"""Random-forest baseline over the 64-d glomerulus feature vector.

Trees are scikit-learn CART trees (Gini, midpoint thresholds, per-split
feature subsampling). Bootstrapping and voting are done here so that
out-of-bag rows are known and each tree casts exactly one vote.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.tree import DecisionTreeClassifier

FOREST_FORMAT = "hiegnet-forest"
FOREST_VERSION = 1


@dataclass
class ForestSpec:
    n_trees: int = 100
    max_features: int = 4
    max_depth: int = 10
    min_split: int = 2
    min_leaf: int = 1
    seed: int = 0


@dataclass
class Tree:
    """Flat node arrays; leaves have ``left == -1`` and carry class counts in ``value``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def leaf_class(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        while np.any(active):
            i = np.nonzero(active)[0]
            n = node[i]
            go_left = X[i, self.feature[n]] <= self.threshold[n]
            node[i] = np.where(go_left, self.left[n], self.right[n])
            active = self.left[node] >= 0
        return np.argmax(self.value[node], axis=1)


@dataclass
class Forest:
    spec: ForestSpec
    n_features: int
    n_classes: int
    trees: list[Tree]
    oob: list[np.ndarray]

    def to_dict(self) -> dict:
        return {"format": FOREST_FORMAT, "version": FOREST_VERSION, "spec": asdict(self.spec),
                "n_features": self.n_features, "n_classes": self.n_classes,
                "trees": [{k: getattr(t, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}
                          for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format") != FOREST_FORMAT or d.get("version") != FOREST_VERSION:
            raise ValueError("not a forest checkpoint of a supported version")
        trees = [Tree(np.asarray(t["feature"], np.int64), np.asarray(t["threshold"], np.float64),
                      np.asarray(t["left"], np.int64), np.asarray(t["right"], np.int64),
                      np.asarray(t["value"], np.float64)) for t in d["trees"]]
        return cls(ForestSpec(**d["spec"]), d["n_features"], d["n_classes"], trees, [])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _from_sklearn(clf: DecisionTreeClassifier, n_classes: int) -> Tree:
    t = clf.tree_
    # sklearn stores per-node class distributions over the classes it saw
    value = np.zeros((t.node_count, n_classes))
    value[:, clf.classes_.astype(np.int64)] = t.value[:, 0, :]
    return Tree(t.feature.astype(np.int64), t.threshold.astype(np.float64),
                t.children_left.astype(np.int64), t.children_right.astype(np.int64), value)


def rf_fit(X, y, spec: ForestSpec | None = None, n_classes: int | None = None) -> Forest:
    spec = spec or ForestSpec()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("random forest needs at least 2 classes in the training labels")
    n_classes = n_classes or int(y.max()) + 1
    rng = np.random.default_rng(spec.seed)
    n = len(y)
    trees, oob = [], []
    for _ in range(spec.n_trees):
        boot = rng.integers(0, n, size=n)
        clf = DecisionTreeClassifier(criterion="gini", max_depth=spec.max_depth,
                                     max_features=min(spec.max_features, X.shape[1]),
                                     min_samples_split=spec.min_split, min_samples_leaf=spec.min_leaf,
                                     random_state=int(rng.integers(0, 2**31 - 1)))
        clf.fit(X[boot], y[boot])
        trees.append(_from_sklearn(clf, n_classes))
        oob.append(np.setdiff1d(np.arange(n), boot))
    return Forest(spec, X.shape[1], n_classes, trees, oob)


def vote_counts(forest: Forest, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError(f"feature width {X.shape[-1]} != forest's {forest.n_features}")
    votes = np.zeros((len(X), forest.n_classes), dtype=np.int64)
    rows = np.arange(len(X))
    for t in forest.trees:
        np.add.at(votes, (rows, t.leaf_class(X)), 1)
    return votes


def rf_predict(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote (ties to the lowest class) and per-class vote frequencies."""
    votes = vote_counts(forest, X)
    return np.argmax(votes, axis=1), votes / max(len(forest.trees), 1)


def oob_accuracy(forest: Forest, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    votes = np.zeros((len(y), forest.n_classes), dtype=np.int64)
    for t, rows in zip(forest.trees, forest.oob):
        if len(rows):
            np.add.at(votes, (rows, t.leaf_class(X[rows])), 1)
    seen = votes.sum(1) > 0
    return float(np.mean(np.argmax(votes[seen], 1) == y[seen])) if np.any(seen) else float("nan")
