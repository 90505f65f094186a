"""From-scratch tree learners, isolation forest and kNN behind one predict surface."""

from theftgate.learners.boosting import fit_boosted
from theftgate.learners.forest import fit_extra_trees, fit_random_forest, fit_tree
from theftgate.learners.iforest import anomaly_score, fit_isolation_forest
from theftgate.learners.knn import fit_knn, predict_knn
from theftgate.learners.model import (
    EXTRA_TREES,
    GRADIENT_BOOSTED,
    ISOLATION_FOREST,
    KNN,
    RANDOM_FOREST,
    SINGLE_TREE,
    HyperParams,
    KNNModel,
    Model,
    TreeEnsemble,
    UnsupportedModelError,
    importance,
    predict,
    predict_proba,
)
from theftgate.learners.serialize import load_model, model_from_bytes, model_to_bytes, save_model

SUPERVISED_KINDS = (SINGLE_TREE, EXTRA_TREES, RANDOM_FOREST, GRADIENT_BOOSTED, KNN)


def fit_by_kind(kind: str, frame, labels, hp: HyperParams = HyperParams(), rng=None,
                classes=None, threads: int = 1) -> Model:
    """Fit any supervised learner by its kind name."""
    if kind == SINGLE_TREE:
        return fit_tree(frame, labels, hp, rng, classes=classes)
    if kind == EXTRA_TREES:
        return fit_extra_trees(frame, labels, hp, rng, classes=classes, threads=threads)
    if kind == RANDOM_FOREST:
        return fit_random_forest(frame, labels, hp, rng, classes=classes, threads=threads)
    if kind == GRADIENT_BOOSTED:
        return fit_boosted(frame, labels, hp, rng, classes=classes, threads=threads)
    if kind == KNN:
        return fit_knn(frame, labels, hp, classes=classes)
    raise UnsupportedModelError(f"unknown supervised model kind {kind!r}")

__all__ = [
    "EXTRA_TREES", "GRADIENT_BOOSTED", "ISOLATION_FOREST", "KNN", "RANDOM_FOREST", "SINGLE_TREE",
    "SUPERVISED_KINDS", "HyperParams", "KNNModel", "Model", "TreeEnsemble", "UnsupportedModelError",
    "anomaly_score", "fit_boosted", "fit_by_kind", "fit_extra_trees", "fit_isolation_forest", "fit_knn",
    "fit_random_forest", "fit_tree", "importance", "load_model", "model_from_bytes",
    "model_to_bytes", "predict", "predict_knn", "predict_proba", "save_model",
]
