"""Second-order gradient boosted trees (logistic for two classes, softmax above).

Each leaf stores ``-learning_rate * G / (H + l2_leaf)`` so that a row's raw
score is exactly ``prior + sum of its leaf values``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from theftgate.learners._tree import (
    Split,
    Tree,
    TreeBuilder,
    exact_best_split,
    newton_score,
    presort,
)
from theftgate.learners.model import (
    GRADIENT_BOOSTED,
    FrameLike,
    HyperParams,
    TreeEnsemble,
    as_matrix,
    encode_labels,
)

_EPS = 1e-15


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(F: np.ndarray) -> np.ndarray:
    shifted = F - F.max(1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(1, keepdims=True)


def logistic_loss(raw: np.ndarray, y: np.ndarray) -> float:
    """Mean binary log loss at raw scores (log-odds)."""
    # log(1 + e^z) - y z, written to stay finite for large |z|
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def logistic_grad_hess(raw: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row first and second derivatives of the log loss in the raw score."""
    p = sigmoid(raw)
    return p - y, p * (1.0 - p)


def softmax_loss(F: np.ndarray, y_pos: np.ndarray) -> float:
    m = F.max(1, keepdims=True)
    lse = (m + np.log(np.exp(F - m).sum(1, keepdims=True))).ravel()
    return float(np.mean(lse - F[np.arange(F.shape[0]), y_pos]))


class _Bins:
    """Per-feature cut points; code c holds x <= cuts[c], the last code is null."""

    def __init__(self, X: np.ndarray, max_bins: int):
        self.cuts: list[np.ndarray] = []
        for j in range(X.shape[1]):
            col = X[:, j]
            u = np.unique(col[~np.isnan(col)])
            if u.size <= max_bins:
                cuts = (u[:-1] + (u[1:] - u[:-1]) / 2.0) if u.size > 1 else np.zeros(0)
            else:
                q = np.quantile(col[~np.isnan(col)], np.linspace(0, 1, max_bins + 1)[1:-1])
                cuts = np.unique(q)
            self.cuts.append(cuts)
        self.width = max_bins + 1  # codes 0..max_bins-1 for values, max_bins for null
        codes = np.empty(X.shape, dtype=np.int64)
        for j, cuts in enumerate(self.cuts):
            col = X[:, j]
            c = np.searchsorted(cuts, col, side="left")
            codes[:, j] = np.where(np.isnan(col), max_bins, c)
        self.codes = codes
        self.null_code = max_bins


def _hist_best_split(bins: _Bins, X: np.ndarray, rows: np.ndarray, g: np.ndarray,
                     h: np.ndarray, min_leaf: int, l2: float) -> Optional[Split]:
    p = X.shape[1]
    B = bins.width
    codes = bins.codes[rows] + (np.arange(p) * B)[None, :]
    flat = codes.ravel()
    size = p * B
    Gh = np.bincount(flat, weights=np.repeat(g, p), minlength=size).reshape(p, B)
    Hh = np.bincount(flat, weights=np.repeat(h, p), minlength=size).reshape(p, B)
    Ch = np.bincount(flat, minlength=size).reshape(p, B).astype(np.float64)
    hist = np.stack([Gh, Hh, Ch], axis=-1)  # p x B x 3
    miss = hist[:, -1]  # p x 3
    cum = np.cumsum(hist[:, :-1], axis=1)  # p x (B-1) x 3
    total = np.array([g.sum(), h.sum(), float(rows.size)])
    score = newton_score(l2)
    parent = score(list(total))
    present = total[None] - miss
    n_cuts = np.array([c.size for c in bins.cuts])
    pos = np.arange(B - 1)[None, :]
    valid = pos < n_cuts[:, None]
    has_miss = miss[:, -1] > 0
    best_val, best = -np.inf, None
    L = cum
    R = present[:, None] - L
    for opt in (0, 1):
        Lc = L + miss[:, None] if opt == 0 else L
        Rc = R if opt == 0 else R + miss[:, None]
        ok = valid & (Lc[..., -1] >= min_leaf) & (Rc[..., -1] >= min_leaf)
        if opt == 1:
            ok &= has_miss[:, None]
        s = np.where(ok, score(list(np.moveaxis(Lc, -1, 0))) + score(list(np.moveaxis(Rc, -1, 0))),
                     -np.inf)
        j, c = np.unravel_index(int(s.argmax()), s.shape)
        if s[j, c] > best_val:
            best_val = float(s[j, c])
            ml = (opt == 0) if has_miss[j] else bool(L[j, c, -1] >= R[j, c, -1])
            best = (int(j), float(bins.cuts[j][c]), ml)
    if best is None or not np.isfinite(best_val):
        return None
    gain = best_val - float(parent)
    if not gain > 0.0:
        return None
    f, thr, ml = best
    x = X[rows, f]
    return Split(f, thr, ml, gain, np.where(np.isnan(x), ml, x <= thr))


def _grow_newton(X: np.ndarray, g: np.ndarray, h: np.ndarray, hp: HyperParams,
                 bins: Optional[_Bins], order: Optional[np.ndarray] = None) -> Tree:
    b = TreeBuilder(1)
    lr, l2 = hp.learning_rate, hp.l2_leaf
    score = newton_score(l2)
    features = np.arange(X.shape[1])

    def leaf(G: float, H: float) -> float:
        return -lr * G / max(H + l2, _EPS)

    rows = np.arange(X.shape[0])
    W = np.column_stack([g, h, np.ones(rows.size)]) if bins is None else None
    root = b.add(rows.size, leaf(g.sum(), h.sum()))
    stack = [(rows, 0, root)]
    while stack:
        rows, depth, node = stack.pop()
        if depth >= hp.boost_max_depth or rows.size < 2 * hp.min_leaf:
            continue
        gn, hn = g[rows], h[rows]
        if bins is None:
            split = exact_best_split(X, rows, features, W, hp.min_leaf, score, order)
        else:
            split = _hist_best_split(bins, X, rows, gn, hn, hp.min_leaf, l2)
        if split is None:
            continue
        lm = split.go_left
        lrows, rrows = rows[lm], rows[~lm]
        left = b.add(lrows.size, leaf(gn[lm].sum(), hn[lm].sum()))
        right = b.add(rrows.size, leaf(gn[~lm].sum(), hn[~lm].sum()))
        b.split(node, split.feature, split.threshold, split.missing_left, 0.5 * split.gain,
                left, right)
        stack.append((rrows, depth + 1, right))
        stack.append((lrows, depth + 1, left))
    return b.build()


def fit_boosted(frame: FrameLike, labels, hp: HyperParams = HyperParams(),
                rng: Optional[np.random.Generator] = None,
                classes: Optional[Sequence] = None, threads: int = 1,
                loss_trace: Optional[list] = None) -> TreeEnsemble:
    """Newton-boosted trees. ``classes`` may list classes absent from ``labels``;
    those get a zero prior and are never predicted.

    ``loss_trace``, when given, receives the training loss before the first
    round and after every round.
    """
    X, names = as_matrix(frame)
    if X.shape[0] == 0:
        raise ValueError("cannot fit on an empty frame")
    classes_arr, y = encode_labels(labels, classes)
    K = classes_arr.size
    n = X.shape[0]
    seed = None if rng is None else int(rng.integers(0, 2**63 - 1))
    bins = _Bins(X, hp.histogram_bins) if hp.histogram_bins else None
    order = presort(X) if bins is None else None
    trees: list[Tree] = []
    if K <= 2:
        yb = (y == 1).astype(np.float64) if K == 2 else np.zeros(n)
        p = float(yb.mean()) if K == 2 else 1.0
        if K == 1:
            prior = np.array([0.0])
        else:
            p = min(max(p, _EPS), 1.0 - _EPS)
            prior = np.array([np.log(p / (1.0 - p))])
        raw = np.full(n, prior[0])
        if loss_trace is not None and K == 2:
            loss_trace.append(logistic_loss(raw, yb))
        if K == 2:
            for _ in range(hp.boosting_rounds):
                g, h = logistic_grad_hess(raw, yb)
                tree = _grow_newton(X, g, h, hp, bins, order)
                raw = raw + tree.predict_value(X)[:, 0]
                trees.append(tree)
                if loss_trace is not None:
                    loss_trace.append(logistic_loss(raw, yb))
    else:
        freq = np.bincount(y, minlength=K) / n
        with np.errstate(divide="ignore"):
            prior = np.log(freq)
        F = np.tile(prior, (n, 1))
        Y = np.zeros((n, K))
        Y[np.arange(n), y] = 1.0
        if loss_trace is not None:
            loss_trace.append(softmax_loss(F, y))
        for _ in range(hp.boosting_rounds):
            P = softmax(F)
            round_trees = []
            for k in range(K):
                g = P[:, k] - Y[:, k]
                h = P[:, k] * (1.0 - P[:, k])
                round_trees.append(_grow_newton(X, g, h, hp, bins, order))
            for k, tree in enumerate(round_trees):
                F[:, k] += tree.predict_value(X)[:, 0]
            trees.extend(round_trees)
            if loss_trace is not None:
                loss_trace.append(softmax_loss(F, y))
    return TreeEnsemble(GRADIENT_BOOSTED, trees, classes_arr, names, hp, seed=seed,
                        prior=np.asarray(prior, dtype=np.float64))


def raw_scores(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """(rows, outputs) raw scores: prior plus every tree's leaf value."""
    K = model.prior.size
    F = np.tile(model.prior, (X.shape[0], 1))
    for i, tree in enumerate(model.trees):
        F[:, i % K] += tree.predict_value(X)[:, 0]
    return F


def boosted_proba(model: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    F = raw_scores(model, X)
    if model.classes.size == 1:
        return np.ones((X.shape[0], 1))
    if model.classes.size == 2:
        p1 = sigmoid(F[:, 0])
        return np.column_stack([1.0 - p1, p1])
    return softmax(F)
