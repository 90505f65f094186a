"""Isolation forest: random axis-aligned cuts until each point stands alone.

Anomaly score ``2 ** (-E[h(x)] / c(psi))`` where ``h`` is the path length
(depth of the reached leaf plus ``c(leaf size)``) and ``c(n)`` is the mean
unsuccessful-search path length of a binary search tree on ``n`` points.
"""

from __future__ import annotations

import logging
import math
from typing import Optional

import numpy as np
from scipy.special import digamma

from theftgate.learners._tree import Tree, TreeBuilder, varying_features
from theftgate.learners.model import (
    ISOLATION_FOREST,
    FrameLike,
    HyperParams,
    TreeEnsemble,
    as_matrix,
    child_seeds,
    parallel_map,
)

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329


def harmonic(i: float) -> float:
    return float(digamma(i + 1.0) + EULER_GAMMA)


def average_path_length(n: int) -> float:
    """c(n) = 2 H(n-1) - 2 (n-1) / n; c(1) = 0, c(2) = 1."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def _grow_isolation(Xc: np.ndarray, rows: np.ndarray, height_limit: int, rng) -> Tree:
    b = TreeBuilder(1)
    p = Xc.shape[1]

    def leaf_path(depth: int, size: int) -> float:
        return depth + average_path_length(size)

    root = b.add(rows.size, leaf_path(0, rows.size))
    stack = [(rows, 0, root)]
    while stack:
        rows, depth, node = stack.pop()
        if depth >= height_limit or rows.size <= 1:
            continue
        picked = next(varying_features(Xc, rows, rng.permutation(p), 1), None)
        if picked is None:
            continue
        f, x, lo, hi = picked
        thr = float(rng.uniform(lo, hi))
        miss_left = bool(rng.integers(0, 2))
        go_left = np.where(np.isnan(x), miss_left, x <= thr)
        lrows, rrows = rows[go_left], rows[~go_left]
        if not lrows.size or not rrows.size:
            continue
        left = b.add(lrows.size, leaf_path(depth + 1, lrows.size))
        right = b.add(rrows.size, leaf_path(depth + 1, rrows.size))
        b.split(node, f, thr, miss_left, 0.0, left, right)
        stack.append((rrows, depth + 1, right))
        stack.append((lrows, depth + 1, left))
    return b.build()


def fit_isolation_forest(frame: FrameLike, hp: HyperParams = HyperParams(),
                         rng: Optional[np.random.Generator] = None,
                         contamination: float = 0.1, threads: int = 1) -> TreeEnsemble:
    """Unsupervised fit; ``contamination`` sets the share of training rows
    scored as anomalous, which fixes the decision threshold."""
    X, names = as_matrix(frame)
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"isolation forest needs at least 2 rows, got {n}")
    if not 0.0 < contamination < 1.0:
        raise ValueError("contamination must be in (0, 1)")
    if rng is None:
        rng = np.random.default_rng(0)
    psi = min(hp.iso_subsample_size, n)
    if psi < hp.iso_subsample_size:
        logger.info("subsample size reduced from %d to %d rows", hp.iso_subsample_size, psi)
    height = max(1, math.ceil(math.log2(psi)))
    Xc = np.asfortranarray(X)
    seeds = child_seeds(rng, hp.tree_count)

    def build(seed: int) -> Tree:
        tree_rng = np.random.default_rng(seed)
        rows = np.sort(tree_rng.choice(n, size=psi, replace=False))
        return _grow_isolation(Xc, rows, height, tree_rng)

    trees = parallel_map(build, seeds, threads)
    model = TreeEnsemble(ISOLATION_FOREST, trees, np.array([0, 1]), names, hp,
                         seed=seeds[0] if seeds else None, sample_size=psi)
    train_scores = scores(model, X)
    model.threshold = float(np.quantile(train_scores, 1.0 - contamination))
    return model


def mean_path_length(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    total = np.zeros(X.shape[0])
    for t in model.trees:
        total += t.predict_value(X)[:, 0]
    return total / len(model.trees)


def scores(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Anomaly score in (0, 1); near 1 means easily isolated."""
    return np.power(2.0, -mean_path_length(model, X) / average_path_length(model.sample_size))


def anomaly_score(model: TreeEnsemble, row) -> float:
    row = np.asarray(row, dtype=np.float64).reshape(1, -1)
    return float(scores(model, row)[0])


def predict_anomalous(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    return scores(model, X) >= model.threshold
