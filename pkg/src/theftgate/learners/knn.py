"""k-nearest neighbours on standardized, mean-imputed features."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from theftgate.learners.model import FrameLike, HyperParams, KNNModel, as_matrix, encode_labels

VAR_FLOOR = 1e-12
_CHUNK_ELEMS = 4_000_000


def fit_knn(frame: FrameLike, labels, hp: HyperParams = HyperParams(),
            classes: Optional[Sequence] = None) -> KNNModel:
    X, names = as_matrix(frame)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot fit on an empty frame")
    if hp.knn_k > n:
        raise ValueError(f"k={hp.knn_k} exceeds {n} training rows")
    classes_arr, y = encode_labels(labels, classes)
    present = ~np.isnan(X)
    counts = present.sum(0)
    mean = np.where(counts > 0, np.where(present, X, 0.0).sum(0) / np.maximum(counts, 1), 0.0)
    filled = np.where(present, X, mean)
    var = ((filled - mean) ** 2 * present).sum(0) / np.maximum(counts, 1)
    scale = np.sqrt(np.maximum(var, VAR_FLOOR))
    return KNNModel(names, classes_arr, hp.knn_k, mean, scale, (filled - mean) / scale, y, hp=hp)


def _standardize(model: KNNModel, X: np.ndarray) -> np.ndarray:
    return (np.where(np.isnan(X), model.mean, X) - model.mean) / model.scale


def neighbours(model: KNNModel, X: np.ndarray) -> np.ndarray:
    """Indices of the k nearest training rows, by distance then index."""
    Q = _standardize(model, X)
    n, p = model.X.shape
    step = max(1, _CHUNK_ELEMS // max(1, n * p))
    out = np.empty((Q.shape[0], model.k), dtype=np.int64)
    for start in range(0, Q.shape[0], step):
        q = Q[start : start + step]
        d = ((q[:, None, :] - model.X[None, :, :]) ** 2).sum(-1)
        out[start : start + step] = np.argsort(d, axis=1, kind="stable")[:, : model.k]
    return out


def _votes(model: KNNModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nb = model.y[neighbours(model, X)]  # q x k class positions
    q, k = nb.shape
    C = model.classes.size
    votes = np.zeros((q, C))
    first = np.full((q, C), k)
    for j in range(k - 1, -1, -1):
        votes[np.arange(q), nb[:, j]] += 1
        first[np.arange(q), nb[:, j]] = j
    return votes, first


def knn_predict_positions(model: KNNModel, X: np.ndarray) -> np.ndarray:
    """Majority class; a vote tie goes to the tied class with the nearest member."""
    votes, first = _votes(model, X)
    return (votes * (model.k + 1) - first).argmax(1)


def knn_proba(model: KNNModel, X: np.ndarray) -> np.ndarray:
    votes, _ = _votes(model, X)
    return votes / model.k


def predict_knn(model: KNNModel, row):
    row = np.asarray(row, dtype=np.float64).reshape(1, -1)
    return model.classes[knn_predict_positions(model, row)[0]]
