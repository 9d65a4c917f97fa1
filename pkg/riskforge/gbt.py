"""
Second-order gradient-boosted trees for the logistic loss, exact greedy
splits, gain importance and a versioned text serialization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from riskforge.lib.design import FeatureMatrix
from riskforge.lib.errors import IoFailure, NoValidSplit
from riskforge.lib.logger import log_debug, log_info

MODULE = "gbt"

FORMAT_HEADER = "riskforge-gbt v1"
BASE_SCORE_CLAMP = 10.0
TOP_K_STRUCTURED = 17
TOP_K_MULTIMODAL = 64


@dataclass(frozen=True)
class GbtConfig:
    max_depth: int = 3
    learning_rate: float = 0.05
    n_trees: int = 100
    subsample: float = 0.8
    reg_lambda: float = 1.0
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must be in (0, 1]")
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("reg_lambda and gamma must be >= 0")


@dataclass(frozen=True)
class Tree:
    # node arrays; feature == -1 marks a leaf
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        n = X.shape[0]
        idx = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        while True:
            f = self.feature[idx]
            internal = f >= 0
            if not internal.any():
                return idx
            x = X[rows, np.where(internal, f, 0)]
            go_left = np.isnan(x) | (x < self.threshold[idx])
            idx = np.where(internal, np.where(go_left, self.left[idx], self.right[idx]), idx)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.weight[self.leaf_index(X)]


@dataclass(frozen=True)
class GbtModel:
    names: tuple[str, ...]
    trees: tuple[Tree, ...]
    base_score: float
    learning_rate: float
    importance_gain: np.ndarray = None

    def margin(self, X) -> np.ndarray:
        values = X.select(self.names).values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
        out = np.full(values.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(values)
        return out


class _Split:
    __slots__ = ("gain", "feature", "threshold", "left_rows", "right_rows")

    def __init__(self, gain, feature, threshold, left_rows, right_rows):
        self.gain = gain
        self.feature = feature
        self.threshold = threshold
        self.left_rows = left_rows
        self.right_rows = right_rows


def _best_split(X, g, h, rows, lam, gamma):
    G, H = g[rows].sum(), h[rows].sum()
    parent = G * G / (H + lam)
    best = None
    for f in range(X.shape[1]):
        x = X[rows, f]
        missing = np.isnan(x)
        present = rows[~missing]
        if present.size < 2:
            continue
        Gm, Hm = g[rows[missing]].sum(), h[rows[missing]].sum()
        order = np.argsort(X[present, f], kind="mergesort")
        xs = X[present[order], f]
        gl = np.cumsum(g[present[order]])[:-1] + Gm
        hl = np.cumsum(h[present[order]])[:-1] + Hm
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        gains = 0.5 * (gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent) - gamma
        gains = np.where(valid, gains, -np.inf)
        pos = int(np.argmax(gains))
        if gains[pos] > 0 and (best is None or gains[pos] > best.gain):
            threshold = 0.5 * (xs[pos] + xs[pos + 1])
            col = X[rows, f]
            go_left = np.isnan(col) | (col < threshold)
            best = _Split(float(gains[pos]), f, float(threshold), rows[go_left], rows[~go_left])
    if best is None:
        raise NoValidSplit("node", "no split with positive gain")
    return best


def _grow_tree(X, g, h, rows, cfg: GbtConfig, importance: np.ndarray) -> Tree:
    feature, threshold, left, right, weight, gain, cover = [], [], [], [], [], [], []

    def new_node(node_rows):
        G, H = g[node_rows].sum(), h[node_rows].sum()
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        weight.append(-G / (H + cfg.reg_lambda))
        gain.append(0.0)
        cover.append(H)
        return len(feature) - 1

    level = [(new_node(rows), rows)]
    for _ in range(cfg.max_depth):
        next_level = []
        for node, node_rows in level:
            try:
                split = _best_split(X, g, h, node_rows, cfg.reg_lambda, cfg.gamma)
            except NoValidSplit:
                continue
            feature[node] = split.feature
            threshold[node] = split.threshold
            gain[node] = split.gain
            importance[split.feature] += split.gain
            lnode = new_node(split.left_rows)
            rnode = new_node(split.right_rows)
            left[node], right[node] = lnode, rnode
            next_level += [(lnode, split.left_rows), (rnode, split.right_rows)]
        if not next_level:
            break
        level = next_level
    if len(feature) == 1:
        log_debug(MODULE, "NoValidSplit: tree is a single leaf")
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(weight, dtype=float), np.array(gain, dtype=float), np.array(cover, dtype=float))


def fit_gbt(X, y, cfg: GbtConfig = GbtConfig()) -> GbtModel:
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    names = X.names if isinstance(X, FeatureMatrix) else tuple(f"x{i}" for i in range(values.shape[1]))
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1")
    n = len(y)
    prevalence = y.mean()
    with np.errstate(divide="ignore"):
        base = np.log(prevalence) - np.log1p(-prevalence)
    base = float(np.clip(base, -BASE_SCORE_CLAMP, BASE_SCORE_CLAMP))

    rng = np.random.default_rng(cfg.seed)
    sample_size = max(1, int(round(cfg.subsample * n)))
    margin = np.full(n, base)
    importance = np.zeros(values.shape[1])
    trees = []
    for _ in range(cfg.n_trees):
        prob = expit(margin)
        g = prob - y
        h = prob * (1.0 - prob)
        if cfg.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=sample_size, replace=False))
        else:
            rows = np.arange(n)
        tree = _grow_tree(values, g, h, rows, cfg, importance)
        trees.append(tree)
        margin += cfg.learning_rate * tree.predict(values)
    splits = sum(int((t.feature >= 0).sum()) for t in trees)
    log_info(MODULE, f"boosted {len(trees)} trees, {splits} splits over {values.shape[1]} features")
    return GbtModel(tuple(names), tuple(trees), base, cfg.learning_rate, importance)


def predict_proba(model: GbtModel, X) -> np.ndarray:
    return expit(model.margin(X))


def training_loss(model: GbtModel, X, y, n_trees: int | None = None) -> float:
    """Mean logistic loss using the first `n_trees` trees."""
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    margin = np.full(values.shape[0], model.base_score)
    for tree in model.trees[:n_trees]:
        margin += model.learning_rate * tree.predict(values)
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def gain_importance(model: GbtModel) -> list[tuple[str, float]]:
    used = np.zeros(len(model.names), dtype=bool)
    for tree in model.trees:
        used[tree.feature[tree.feature >= 0]] = True
    ranked = sorted(np.flatnonzero(used), key=lambda i: (-model.importance_gain[i], i))
    return [(model.names[i], float(model.importance_gain[i])) for i in ranked]


def importance_table(model: GbtModel) -> pd.DataFrame:
    ranked = gain_importance(model)
    total = sum(g for _, g in ranked) or 1.0
    return pd.DataFrame({"feature": [n for n, _ in ranked], "gain": [g for _, g in ranked],
                         "relative_gain": [g / total for _, g in ranked]},
                        columns=["feature", "gain", "relative_gain"])


def top_k_features(model: GbtModel, k: int) -> list[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return [name for name, _ in gain_importance(model)[:k]]


# === Text serialization ===
def dumps(model: GbtModel) -> str:
    lines = [FORMAT_HEADER,
             "names\t" + "\t".join(model.names),
             f"base_score {model.base_score!r}",
             f"learning_rate {model.learning_rate!r}",
             "importance " + " ".join(repr(float(v)) for v in model.importance_gain),
             f"trees {len(model.trees)}"]
    for i, tree in enumerate(model.trees):
        lines.append(f"tree {i} {tree.n_nodes}")
        for j in range(tree.n_nodes):
            lines.append(f"{j} {tree.feature[j]} {float(tree.threshold[j])!r} {tree.left[j]} {tree.right[j]} "
                         f"{float(tree.weight[j])!r} {float(tree.gain[j])!r} {float(tree.cover[j])!r}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> GbtModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise IoFailure("gbt", f"expected header {FORMAT_HEADER!r}")
    try:
        names = tuple(lines[1].split("\t")[1:])
        base = float(lines[2].split()[1])
        lr = float(lines[3].split()[1])
        importance = np.array([float(v) for v in lines[4].split()[1:]])
        n_trees = int(lines[5].split()[1])
        trees, pos = [], 6
        for _ in range(n_trees):
            n_nodes = int(lines[pos].split()[2])
            rows = [lines[pos + 1 + j].split() for j in range(n_nodes)]
            pos += 1 + n_nodes
            trees.append(Tree(np.array([int(r[1]) for r in rows], dtype=np.int64),
                              np.array([float(r[2]) for r in rows]),
                              np.array([int(r[3]) for r in rows], dtype=np.int64),
                              np.array([int(r[4]) for r in rows], dtype=np.int64),
                              np.array([float(r[5]) for r in rows]),
                              np.array([float(r[6]) for r in rows]),
                              np.array([float(r[7]) for r in rows])))
    except (IndexError, ValueError) as e:
        raise IoFailure("gbt", f"malformed model text: {e}") from e
    return GbtModel(names, tuple(trees), base, lr, importance)
