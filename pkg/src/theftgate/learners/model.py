from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence, Union

import numpy as np

from theftgate.frame import FeatureFrame
from theftgate.learners._tree import Tree
from theftgate.telemetry import SchemaError

SINGLE_TREE = "singleTree"
EXTRA_TREES = "extraTrees"
RANDOM_FOREST = "randomForest"
GRADIENT_BOOSTED = "gradientBoosted"
ISOLATION_FOREST = "isolationForest"
KNN = "knn"
TREE_KINDS = (SINGLE_TREE, EXTRA_TREES, RANDOM_FOREST, GRADIENT_BOOSTED, ISOLATION_FOREST)


class UnsupportedModelError(TypeError):
    pass


@dataclass(frozen=True)
class HyperParams:
    """Learner settings. ``feature_subsample=None`` means sqrt(p) per split.

    ``boost_max_depth`` bounds boosted trees separately from forests, and
    ``histogram_bins=0`` keeps exact sorted split search for boosting.
    """

    tree_count: int = 100
    max_depth: int = 12
    min_leaf: int = 5
    feature_subsample: Optional[float] = None
    learning_rate: float = 0.1
    boosting_rounds: int = 200
    l2_leaf: float = 1.0
    knn_k: int = 5
    iso_subsample_size: int = 256
    boost_max_depth: int = 6
    histogram_bins: int = 0

    def __post_init__(self) -> None:
        for name in ("tree_count", "max_depth", "min_leaf", "knn_k", "iso_subsample_size",
                     "boost_max_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.boosting_rounds < 0:
            raise ValueError("boosting_rounds must be non-negative")
        if self.histogram_bins < 0 or self.histogram_bins == 1 or self.histogram_bins > 65535:
            raise ValueError("histogram_bins must be 0 (exact) or in [2, 65535]")
        if self.feature_subsample is not None and not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must be in (0, 1]")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.l2_leaf < 0.0:
            raise ValueError("l2_leaf must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def features_per_split(self, p: int) -> int:
        if self.feature_subsample is None:
            return max(1, int(np.sqrt(p)))
        return max(1, int(round(self.feature_subsample * p)))


@dataclass
class TreeEnsemble:
    kind: str
    trees: list[Tree]
    classes: np.ndarray
    feature_names: list[str]
    hp: HyperParams
    seed: Optional[int] = None
    # boosting: raw-score prior per output; isolation forest: unused
    prior: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # isolation forest: subsample size and score threshold for "anomalous"
    sample_size: int = 0
    threshold: float = float("nan")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def feature_gain(self) -> np.ndarray:
        gain = np.zeros(self.n_features)
        for t in self.trees:
            inner = ~t.is_leaf
            np.add.at(gain, t.feature[inner], t.gain[inner])
        return gain


@dataclass
class KNNModel:
    feature_names: list[str]
    classes: np.ndarray
    k: int
    mean: np.ndarray
    scale: np.ndarray
    X: np.ndarray  # standardized training rows
    y: np.ndarray  # class positions into ``classes``
    kind: str = KNN
    hp: HyperParams = field(default_factory=HyperParams)


Model = Union[TreeEnsemble, KNNModel]
FrameLike = Union[FeatureFrame, np.ndarray]


def schema_hash(names: Sequence[str]) -> str:
    return hashlib.sha256("\x1f".join(names).encode("utf-8")).hexdigest()


def as_matrix(frame: FrameLike, names: Optional[Sequence[str]] = None) -> tuple[np.ndarray, list[str]]:
    if isinstance(frame, FeatureFrame):
        return frame.values, list(frame.columns)
    X = np.asarray(frame, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if names is None:
        names = [f"f{i}" for i in range(X.shape[1])]
    return X, list(names)


def check_columns(model: Model, frame: FrameLike) -> np.ndarray:
    """Matrix for ``frame`` after confirming it matches the training schema."""
    if isinstance(frame, FeatureFrame):
        if frame.columns != model.feature_names:
            missing = [c for c in model.feature_names if c not in frame.columns]
            extra = [c for c in frame.columns if c not in model.feature_names]
            raise SchemaError(
                f"column mismatch: missing={missing} extra={extra}"
                + ("" if missing or extra else " (order differs)")
            )
        return frame.values
    X = np.asarray(frame, dtype=np.float64)
    if X.ndim == 1:  # one column of rows for single-feature models, else one row
        X = X.reshape(-1, 1) if len(model.feature_names) == 1 else X.reshape(1, -1)
    if X.shape[1] != len(model.feature_names):
        raise SchemaError(f"expected {len(model.feature_names)} columns, got {X.shape[1]}")
    return X


def encode_labels(labels, classes: Optional[Sequence] = None) -> tuple[np.ndarray, np.ndarray]:
    """Class list and per-row class positions."""
    y = np.asarray(labels)
    if classes is None:
        classes_arr = np.unique(y)
    else:
        classes_arr = np.asarray(classes)
    pos = np.searchsorted(classes_arr, y)
    pos = np.clip(pos, 0, max(classes_arr.size - 1, 0))
    if classes_arr.size == 0 or not np.array_equal(classes_arr[pos], y):
        raise ValueError("labels contain values outside the class list")
    return classes_arr, pos.astype(np.int64)


def child_seeds(rng: np.random.Generator, count: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=count, dtype=np.int64)]


def parallel_map(fn: Callable, items: list, threads: int = 1) -> list:
    """Order-preserving map; results never depend on ``threads``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def importance(model: Model) -> list[tuple[str, float]]:
    """Features by descending accumulated split gain, ties by name."""
    if not isinstance(model, TreeEnsemble):
        raise UnsupportedModelError(f"importance is undefined for {model.kind} models")
    gain = model.feature_gain
    pairs = [(name, float(g)) for name, g in zip(model.feature_names, gain)]
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def predict_proba(model: Model, frame: FrameLike) -> np.ndarray:
    X = check_columns(model, frame)
    from theftgate.learners import boosting, forest, iforest, knn

    if isinstance(model, KNNModel):
        return knn.knn_proba(model, X)
    if model.kind == GRADIENT_BOOSTED:
        return boosting.boosted_proba(model, X)
    if model.kind == ISOLATION_FOREST:
        s = iforest.scores(model, X)
        return np.column_stack([1.0 - s, s])
    return forest.forest_proba(model, X)


def predict(model: Model, frame: FrameLike) -> np.ndarray:
    """Class labels; argmax ties go to the lowest class index."""
    X = check_columns(model, frame)
    from theftgate.learners import forest, iforest, knn

    if isinstance(model, KNNModel):
        return model.classes[knn.knn_predict_positions(model, X)]
    if model.kind == ISOLATION_FOREST:
        return iforest.predict_anomalous(model, X).astype(np.int64)
    if model.kind in (EXTRA_TREES, RANDOM_FOREST):
        return model.classes[forest.forest_votes(model, X).argmax(1)]
    return model.classes[predict_proba(model, X).argmax(1)]
