"""Flat-array decision trees and the split searches shared by every learner.

Rows go left when ``x <= threshold``; a null ``x`` follows the node's
``missing_left`` flag, which is learned per split (both directions are
scored, the better one is kept).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

LEAF = -1
# Upper bound on elements of one (rows x features x channels) cumulative block.
_CHUNK_ELEMS = 4_000_000


@dataclass
class Tree:
    feature: np.ndarray  # int32, LEAF for leaves
    threshold: np.ndarray  # float64
    missing_left: np.ndarray  # bool
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64, (nodes, outputs)
    gain: np.ndarray  # float64, realized split gain; 0 at leaves
    n_samples: np.ndarray  # int64

    @property
    def node_count(self) -> int:
        return int(self.feature.size)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == LEAF

    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] != LEAF:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            nd = node[active]
            feat = self.feature[nd]
            inner = feat != LEAF
            active, nd, feat = active[inner], nd[inner], feat[inner]
            if not active.size:
                break
            x = X[active, feat]
            go_left = np.where(np.isnan(x), self.missing_left[nd], x <= self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


class TreeBuilder:
    """Accumulates nodes depth-first; ids follow creation order."""

    def __init__(self, n_outputs: int):
        self.n_outputs = n_outputs
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.missing_left: list[bool] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[np.ndarray] = []
        self.gain: list[float] = []
        self.n_samples: list[int] = []

    def add(self, n_samples: int, value) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.missing_left.append(False)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(np.asarray(value, dtype=np.float64).reshape(self.n_outputs))
        self.gain.append(0.0)
        self.n_samples.append(int(n_samples))
        return len(self.feature) - 1

    def split(self, node: int, feature: int, threshold: float, missing_left: bool,
              gain: float, left: int, right: int) -> None:
        self.feature[node] = int(feature)
        self.threshold[node] = float(threshold)
        self.missing_left[node] = bool(missing_left)
        self.gain[node] = float(gain)
        self.left[node] = left
        self.right[node] = right

    def build(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold, dtype=np.float64),
            missing_left=np.array(self.missing_left, dtype=bool),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            value=np.vstack(self.value) if self.value else np.zeros((0, self.n_outputs)),
            gain=np.array(self.gain, dtype=np.float64),
            n_samples=np.array(self.n_samples, dtype=np.int64),
        )


@dataclass
class Split:
    feature: int
    threshold: float
    missing_left: bool
    gain: float
    go_left: np.ndarray  # bool over the node's rows


# Node scores: larger is better, additive over children. A score takes a
# sequence of per-channel sums; the final channel is always the row count.
ScoreFn = Callable[[Sequence], np.ndarray]


def gini_score(ch: Sequence) -> np.ndarray:
    """sum_k c_k^2 / n, so that n * impurity = n - score."""
    n = ch[-1]
    sq = ch[0] * ch[0]
    for c in ch[1:-1]:
        sq = sq + c * c
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, sq / n, 0.0)


def newton_score(l2: float) -> ScoreFn:
    """G^2 / (H + l2) over channels (g, h, count)."""

    def score(ch: Sequence) -> np.ndarray:
        G, H = ch[0], ch[1]
        with np.errstate(invalid="ignore", divide="ignore"):
            return G * G / (H + l2)

    return score


def midpoint(lo: float, hi: float) -> float:
    mid = lo + (hi - lo) / 2.0
    return lo if mid >= hi else mid


def presort(X: np.ndarray) -> np.ndarray:
    """(features, rows) row ids ordered by value per feature, nulls last."""
    return np.argsort(X, axis=0, kind="stable").T.copy()


def exact_best_split(
    X: np.ndarray,
    rows: np.ndarray,
    features: np.ndarray,
    W: np.ndarray,
    min_leaf: int,
    score: ScoreFn,
    presorted: Optional[np.ndarray] = None,
) -> Optional[Split]:
    """Best (feature, midpoint, missing direction) by exhaustive search.

    ``W`` holds per-row channels for every row of ``X`` (last channel =
    count); ``rows`` may repeat ids (bootstrap) unless ``presorted`` is given.
    Ties keep the lowest feature position in ``features``, then the lowest
    threshold, then missing-left.
    """
    n = rows.size
    if n < 2 * min_leaf or n < 2:
        return None
    C = W.shape[1]
    Wn = W[rows]
    total = Wn.sum(0)
    parent = float(score(list(total)))
    use_presort = presorted is not None and 8 * n >= X.shape[0]
    if use_presort:
        member = np.zeros(X.shape[0], dtype=bool)
        member[rows] = True
    best_val = -np.inf
    best = None
    chunk = max(1, _CHUNK_ELEMS // max(1, n * (C + 2)))
    for start in range(0, features.size, chunk):
        feats = features[start : start + chunk]
        nf = feats.size
        if use_presort:
            full = presorted[feats]
            glob = full[member[full]].reshape(nf, n)
        else:
            sub = X[np.ix_(rows, feats)].T
            glob = rows[np.argsort(sub, axis=1, kind="stable")]
        sv = X[glob, feats[:, None]]  # f x n, nulls last
        n_present = n - np.isnan(sv).sum(1)
        last = np.maximum(n_present - 1, 0)
        ar = np.arange(nf)
        L, R, miss = [], [], []
        for c in range(C):
            cum = np.cumsum(W[glob, c], axis=1)
            pres = np.where(n_present > 0, cum[ar, last], 0.0)
            L.append(cum[:, :-1])
            R.append(pres[:, None] - cum[:, :-1])
            miss.append(total[c] - pres)
        valid = sv[:, 1:] > sv[:, :-1]  # NaN compares false, so the null tail is excluded
        has_miss = miss[-1] > 0
        cand = np.full((nf, n - 1, 2), -np.inf)
        # option 0: missing go left, option 1: missing go right
        for opt in (0, 1):
            if opt == 1 and not has_miss.any():
                break
            if opt == 0:
                Lc = [L[c] + miss[c][:, None] for c in range(C)]
                Rc = R
            else:
                Lc = L
                Rc = [R[c] + miss[c][:, None] for c in range(C)]
            ok = valid & (Lc[-1] >= min_leaf) & (Rc[-1] >= min_leaf)
            if opt == 1:
                ok &= has_miss[:, None]
            cand[..., opt] = np.where(ok, score(Lc) + score(Rc), -np.inf)
        # per feature, first maximum in (position, option) order
        flat = cand.reshape(nf, -1)
        arg = flat.argmax(1)
        vals = flat[ar, arg]
        j = int(vals.argmax())
        if vals[j] > best_val:
            best_val = float(vals[j])
            pos, opt = divmod(int(arg[j]), 2)
            thr = midpoint(float(sv[j, pos]), float(sv[j, pos + 1]))
            if has_miss[j]:
                miss_left = opt == 0
            else:
                miss_left = bool(L[-1][j, pos] >= R[-1][j, pos])
            best = (int(feats[j]), thr, miss_left)
    if best is None or not np.isfinite(best_val):
        return None
    gain = best_val - parent
    if not gain > 0.0:
        return None
    f, thr, miss_left = best
    x = X[rows, f]
    go_left = np.where(np.isnan(x), miss_left, x <= thr)
    return Split(f, thr, miss_left, gain, go_left)


def varying_features(Xc: np.ndarray, rows: np.ndarray, order, k: int):
    """First ``k`` features in ``order`` not constant on ``rows``.

    Yields (feature, column values, min, max); ``Xc`` should be column-major.
    """
    taken = 0
    for f in order:
        x = Xc[rows, f]
        lo = np.fmin.reduce(x)
        hi = np.fmax.reduce(x)
        if hi > lo:
            yield int(f), x, float(lo), float(hi)
            taken += 1
            if taken == k:
                return


def random_threshold_split(
    Xc: np.ndarray,
    rows: np.ndarray,
    order,
    k: int,
    W: np.ndarray,
    min_leaf: int,
    score: ScoreFn,
    rng,
) -> Optional[Split]:
    """Draw one uniform threshold for each of ``k`` varying features; keep the best."""
    total = W.sum(0)
    parent = float(score(list(total)))
    best_val = -np.inf
    best = None
    for f, x, lo, hi in varying_features(Xc, rows, order, k):
        thr = float(rng.uniform(lo, hi))
        nan = np.isnan(x)
        le = x <= thr
        L = le.astype(np.float64) @ W
        M = nan.astype(np.float64) @ W if nan.any() else np.zeros_like(total)
        R = total - L - M
        options = [(True, L + M, R)]
        if M[-1] > 0:
            options.append((False, L, R + M))
        for miss_left, Lc, Rc in options:
            if Lc[-1] < min_leaf or Rc[-1] < min_leaf:
                continue
            s = float(score(list(Lc)) + score(list(Rc)))
            if s > best_val:
                best_val = s
                if M[-1] == 0:
                    miss_left = bool(L[-1] >= R[-1])
                best = (f, thr, miss_left, nan, le)
    if best is None:
        return None
    gain = best_val - parent
    if not gain > 0.0:
        return None
    f, thr, miss_left, nan, le = best
    return Split(f, thr, miss_left, gain, np.where(nan, miss_left, le))


def column_ranges(X: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column min and max over non-null cells (NaN when all null)."""
    sub = X[rows]
    return np.fmin.reduce(sub, axis=0), np.fmax.reduce(sub, axis=0)
