"""Gini-impurity classification trees: CART, random forest, extra trees."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from theftgate.learners._tree import (
    Tree,
    TreeBuilder,
    exact_best_split,
    gini_score,
    presort,
    random_threshold_split,
    varying_features,
)
from theftgate.learners.model import (
    EXTRA_TREES,
    RANDOM_FOREST,
    SINGLE_TREE,
    FrameLike,
    HyperParams,
    TreeEnsemble,
    as_matrix,
    child_seeds,
    encode_labels,
    parallel_map,
)

_CART, _RF, _ET = "cart", "rf", "et"


def _grow(X: np.ndarray, W: np.ndarray, rows: np.ndarray, hp: HyperParams, mode: str,
          rng, k_features: int, Xc: Optional[np.ndarray] = None,
          order: Optional[np.ndarray] = None) -> Tree:
    n_classes = W.shape[1] - 1
    p = X.shape[1]
    b = TreeBuilder(n_classes)

    def leaf_value(counts: np.ndarray) -> np.ndarray:
        return counts[:-1] / counts[-1]

    counts = W[rows].sum(0)
    root = b.add(rows.size, leaf_value(counts))
    stack = [(rows, 0, root, counts)]
    all_features = np.arange(p)
    while stack:
        rows, depth, node, counts = stack.pop()
        n = rows.size
        if depth >= hp.max_depth or n < 2 * hp.min_leaf or counts[:-1].max() == n:
            continue
        Wn = W[rows]
        if mode == _CART:
            split = exact_best_split(X, rows, all_features, W, hp.min_leaf, gini_score,
                                     order)
        elif mode == _RF:
            feats = [f for f, *_ in varying_features(Xc, rows, rng.permutation(p), k_features)]
            if not feats:
                continue
            split = exact_best_split(X, rows, np.array(sorted(feats)), W, hp.min_leaf,
                                     gini_score)
        else:
            split = random_threshold_split(Xc, rows, rng.permutation(p), k_features, Wn,
                                           hp.min_leaf, gini_score, rng)
        if split is None:
            continue
        lrows, rrows = rows[split.go_left], rows[~split.go_left]
        lcounts = Wn[split.go_left].sum(0)
        rcounts = counts - lcounts
        left = b.add(lrows.size, leaf_value(lcounts))
        right = b.add(rrows.size, leaf_value(rcounts))
        b.split(node, split.feature, split.threshold, split.missing_left, split.gain, left, right)
        stack.append((rrows, depth + 1, right, rcounts))
        stack.append((lrows, depth + 1, left, lcounts))
    return b.build()


def _prepare(frame: FrameLike, labels, classes):
    X, names = as_matrix(frame)
    if X.shape[0] == 0:
        raise ValueError("cannot fit on an empty frame")
    y = np.asarray(labels)
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {X.shape[0]} rows")
    classes_arr, pos = encode_labels(y, classes)
    W = np.zeros((X.shape[0], classes_arr.size + 1))
    W[np.arange(X.shape[0]), pos] = 1.0
    W[:, -1] = 1.0
    return X, names, classes_arr, W


def fit_tree(frame: FrameLike, labels, hp: HyperParams = HyperParams(),
             rng: Optional[np.random.Generator] = None,
             classes: Optional[Sequence] = None) -> TreeEnsemble:
    """Greedy CART: exact best midpoint over all features at every node."""
    X, names, classes_arr, W = _prepare(frame, labels, classes)
    tree = _grow(X, W, np.arange(X.shape[0]), hp, _CART, rng, X.shape[1], order=presort(X))
    return TreeEnsemble(SINGLE_TREE, [tree], classes_arr, names, hp)


def _fit_forest(kind: str, frame, labels, hp, rng, classes, threads) -> TreeEnsemble:
    X, names, classes_arr, W = _prepare(frame, labels, classes)
    if rng is None:
        rng = np.random.default_rng(0)
    seeds = child_seeds(rng, hp.tree_count)
    k = hp.features_per_split(X.shape[1])
    n = X.shape[0]
    Xc = np.asfortranarray(X)

    def build(seed: int) -> Tree:
        tree_rng = np.random.default_rng(seed)
        if kind == RANDOM_FOREST:
            rows = np.sort(tree_rng.integers(0, n, size=n))
            return _grow(X, W, rows, hp, _RF, tree_rng, k, Xc)
        return _grow(X, W, np.arange(n), hp, _ET, tree_rng, k, Xc)

    trees = parallel_map(build, seeds, threads)
    return TreeEnsemble(kind, trees, classes_arr, names, hp, seed=seeds[0] if seeds else None)


def fit_random_forest(frame: FrameLike, labels, hp: HyperParams = HyperParams(),
                      rng: Optional[np.random.Generator] = None,
                      classes: Optional[Sequence] = None, threads: int = 1) -> TreeEnsemble:
    """Bootstrap rows per tree; exact best threshold within a random feature subset."""
    return _fit_forest(RANDOM_FOREST, frame, labels, hp, rng, classes, threads)


def fit_extra_trees(frame: FrameLike, labels, hp: HyperParams = HyperParams(),
                    rng: Optional[np.random.Generator] = None,
                    classes: Optional[Sequence] = None, threads: int = 1) -> TreeEnsemble:
    """All rows per tree; one uniform random threshold per sampled feature."""
    return _fit_forest(EXTRA_TREES, frame, labels, hp, rng, classes, threads)


def forest_votes(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Per-class vote counts, one vote per tree for its leaf's argmax class."""
    votes = np.zeros((X.shape[0], model.classes.size))
    rows = np.arange(X.shape[0])
    for t in model.trees:
        winner = t.predict_value(X).argmax(1)
        votes[rows, winner] += 1.0
    return votes


def forest_proba(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    if model.kind == SINGLE_TREE:
        return model.trees[0].predict_value(X)
    votes = forest_votes(model, X)
    return votes / votes.sum(1, keepdims=True)
