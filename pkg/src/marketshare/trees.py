"""CART regression trees, bagged forests and squared-loss boosting.

Trees are stored as flat node arrays (the same layout the JSON model format
uses) so that prediction and Tree SHAP can walk them without recursion.
A sample goes left at an internal node iff ``x[feature] <= threshold``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyData, MissingCover, SchemaMismatch

MODEL_FORMAT = "marketshare-forest/1"
LEAF = -1


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    max_features_fraction: float = 1.0
    bootstrap: bool = True
    learning_rate: float = 0.1
    cap_lo: float = 2.0
    cap_hi: float = 99.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if not 0 < self.max_features_fraction <= 1:
            raise ValueError("max_features_fraction must be in (0, 1]")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if not self.cap_lo < self.cap_hi:
            raise ValueError("cap_lo must be < cap_hi")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return HyperParams(**d)


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def is_leaf(self, i):
        return self.feature[i] == LEAF

    def apply(self, X):
        """Index of the leaf each row of ``X`` lands in."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            active = np.nonzero(f != LEAF)[0]
            if active.size == 0:
                return node
            cur = node[active]
            go_left = X[active, f[active]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, X):
        return self.value[self.apply(X)]

    def depth(self):
        d = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max()) if self.n_nodes else 0

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist(), "cover": self.cover.tolist(),
                "gain": self.gain.tolist()}

    @classmethod
    def from_dict(cls, d):
        if "cover" not in d or d["cover"] is None:
            raise MissingCover("tree node arrays lack 'cover'")
        n = len(d["feature"])
        return cls(feature=np.asarray(d["feature"], dtype=np.int64),
                   threshold=np.asarray(d["threshold"], dtype=float),
                   left=np.asarray(d["left"], dtype=np.int64),
                   right=np.asarray(d["right"], dtype=np.int64),
                   value=np.asarray(d["value"], dtype=float),
                   cover=np.asarray(d["cover"], dtype=float),
                   gain=np.asarray(d.get("gain", [0.0] * n), dtype=float))

    @classmethod
    def leaf(cls, value, cover=1.0):
        return cls(np.array([LEAF]), np.array([0.0]), np.array([LEAF]), np.array([LEAF]),
                   np.array([float(value)]), np.array([float(cover)]), np.array([0.0]))


def best_split(X, y, features, min_samples_leaf):
    """Best (gain, feature, threshold) over ``features`` or None.

    Gain is the SSE reduction.  Thresholds are midpoints of consecutive
    distinct values; near-equal gains (relative 1e-12) resolve to the lower
    feature index, then the lower threshold.
    """
    n = len(y)
    if n < 2 * min_samples_leaf or n < 2:
        return None
    yc = y - y.mean()
    sse = float(yc @ yc)
    if sse <= 0.0:
        return None
    cols = np.asarray(features)
    xs_all = X[:, cols]
    order = np.argsort(xs_all, axis=0, kind="stable")
    xs = np.take_along_axis(xs_all, order, axis=0)
    csum = np.cumsum(yc[order], axis=0)
    left_sum, total = csum[:-1], csum[-1]
    n_left = np.arange(1, n, dtype=float)[:, None]
    n_right = n - n_left
    right_sum = total - left_sum
    gain = left_sum ** 2 / n_left + right_sum ** 2 / n_right - total ** 2 / n
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
    gain = np.where(valid, gain, -np.inf)
    best = gain.max()
    tol = 1e-12 * sse
    if not np.isfinite(best) or best <= tol:
        return None
    # first column (lowest feature index) then first row (lowest threshold)
    hit = np.argwhere((gain >= best - tol).T)
    j, i = hit[0]
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(gain[i, j]), int(cols[j]), float(thr)


def fit_tree(X, y, params=HyperParams(), seed=0):
    """Greedy CART on squared error; returns a :class:`Tree`."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0 or X.ndim != 2 or X.shape[0] != len(y):
        raise EmptyData("fit_tree needs a non-empty 2-D X aligned with y")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = X.shape[1]
    k = max(1, math.ceil(params.max_features_fraction * d - 1e-12))

    feature, threshold, left, right, value, cover, gain = [], [], [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[idx].mean()))
        cover.append(float(len(idx)))
        gain.append(0.0)
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        if k < d:
            cand = np.sort(rng.choice(d, size=k, replace=False))
        else:
            cand = np.arange(d)
        split = best_split(X[idx], y[idx], cand, params.min_samples_leaf)
        if split is None:
            continue
        g, f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node], gain[node] = f, thr, g
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded (and numbered) first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=float), np.array(cover, dtype=float),
                np.array(gain, dtype=float))


@dataclass
class ForestModel:
    trees: list
    feature_names: list
    params: HyperParams = field(default_factory=HyperParams)
    seed: int = 0
    kind: str = "rf"  # "rf": mean of trees; "gbm": base + learning_rate * sum
    base_value: float = 0.0
    train_trace: list = field(default_factory=list)

    @property
    def label(self):
        return "RF" if self.kind == "rf" else "GBM (XGB-analog)"

    @property
    def tree_scale(self):
        """Weight each tree's output carries in the raw prediction."""
        return 1.0 / len(self.trees) if self.kind == "rf" else self.params.learning_rate

    @property
    def offset(self):
        return 0.0 if self.kind == "rf" else self.base_value

    def raw_predict(self, X):
        X = check_schema(X, self.feature_names)
        out = np.zeros(len(X))
        for t in self.trees:
            out += t.predict(X)
        return self.offset + self.tree_scale * out

    def to_dict(self):
        return {"format": MODEL_FORMAT, "kind": self.kind, "seed": self.seed,
                "feature_names": list(self.feature_names), "params": asdict(self.params),
                "base_value": self.base_value, "train_trace": list(self.train_trace),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} document")
        return cls(trees=[Tree.from_dict(t) for t in d["trees"]],
                   feature_names=list(d["feature_names"]), params=HyperParams(**d["params"]),
                   seed=d["seed"], kind=d["kind"], base_value=d["base_value"],
                   train_trace=list(d.get("train_trace", [])))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def check_schema(X, feature_names):
    """Validate the column layout of ``X`` and return it as a float array."""
    cols = getattr(X, "columns", None)
    if cols is not None and list(cols) != list(feature_names):
        raise SchemaMismatch("column names differ from the model's feature names")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(feature_names):
        raise SchemaMismatch(f"expected {len(feature_names)} columns, got shape {X.shape}")
    return X


def tree_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _names(X, feature_names):
    if feature_names is not None:
        return list(feature_names)
    cols = getattr(X, "columns", None)
    return [str(c) for c in cols] if cols is not None else [f"x{j}" for j in range(np.shape(X)[1])]


def fit_forest(X, y, params=HyperParams(), seed=0, feature_names=None):
    names = _names(X, feature_names)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise EmptyData("fit_forest needs at least one row")
    n = len(y)
    trees = []
    for i in range(params.n_trees):
        rng = tree_rng(seed, i)
        if params.bootstrap:
            idx = rng.integers(0, n, size=n)
            trees.append(fit_tree(X[idx], y[idx], params, rng))
        else:
            trees.append(fit_tree(X, y, params, rng))
    return ForestModel(trees=trees, feature_names=names, params=params, seed=seed, kind="rf")


def fit_gbm(X, y, params=HyperParams(), seed=0, feature_names=None):
    """Stagewise squared-loss boosting; every tree fits the current residuals.

    Trees always see the full training set (the bootstrap flag is ignored)
    so the per-round training MSE, kept in ``train_trace``, cannot increase.
    """
    names = _names(X, feature_names)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise EmptyData("fit_gbm needs at least one row")
    base = float(y.mean())
    pred = np.full(len(y), base)
    trace = [float(np.mean((y - pred) ** 2))]
    trees = []
    for i in range(params.n_trees):
        tree = fit_tree(X, y - pred, params, tree_rng(seed, i))
        pred = pred + params.learning_rate * tree.predict(X)
        trees.append(tree)
        trace.append(float(np.mean((y - pred) ** 2)))
    return ForestModel(trees=trees, feature_names=names, params=params, seed=seed,
                       kind="gbm", base_value=base, train_trace=trace)
