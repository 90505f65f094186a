"""Two-phase feature selection: rank by boosted-tree gain and truncate to
``k``, then grow a subset greedily by a validation metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from theftgate.experiments import stratified_indices
from theftgate.frame import MALICIOUS, FeatureFrame
from theftgate.learners import HyperParams, Model, fit_boosted, importance, predict
from theftgate.learners.model import encode_labels, parallel_map
from theftgate.metrics import ConfusionCounts, MultiClassConfusion, f1_report, for_rate

logger = logging.getLogger(__name__)

CONVERGED, EXHAUSTED, MAX_REACHED = "converged", "exhausted", "maxReached"

ModelFactory = Callable[[np.ndarray, np.ndarray, np.random.Generator], Model]


@dataclass(frozen=True)
class Metric:
    name: str
    fn: Callable[[np.ndarray, np.ndarray], float]
    higher_is_better: bool
    ideal: float

    def oriented(self, value: float) -> float:
        return value if self.higher_is_better else -value


def _for(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(for_rate(ConfusionCounts.from_predictions(y_true == MALICIOUS,
                                                           y_pred == MALICIOUS)))


def _macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    classes = np.union1d(np.unique(y_true), np.unique(y_pred))
    return float(f1_report(MultiClassConfusion.from_predictions(classes, y_true, y_pred)).macro)


FOR_METRIC = Metric("for_rate", _for, higher_is_better=False, ideal=0.0)
MACRO_F1 = Metric("macro_f1", _macro_f1, higher_is_better=True, ideal=1.0)


@dataclass
class SelectionTrace:
    steps: list = field(default_factory=list)  # (feature added, metric after adding)
    chosen: list = field(default_factory=list)
    stop_reason: str = ""
    metric: str = ""
    higher_is_better: bool = True


def rank_and_truncate(frame: FeatureFrame, labels, k: int, hp: HyperParams = HyperParams(),
                      rng: Optional[np.random.Generator] = None, threads: int = 1) -> list[str]:
    """Top ``k`` columns by accumulated gain of a boosted model fit on all columns."""
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(frame.columns):
        raise ValueError(f"k={k} exceeds the {len(frame.columns)} available columns")
    model = fit_boosted(frame, labels, hp, rng, threads=threads)
    return [name for name, _ in importance(model)[:k]]


def forward_select(frame: FeatureFrame, labels, candidates: Sequence[str],
                   factory: ModelFactory, metric: Metric, tolerance: float = 1e-4,
                   patience: Optional[int] = 3, max_features: Optional[int] = 50,
                   seed: int = 0, validation_fraction: float = 0.25,
                   threads: int = 1) -> SelectionTrace:
    """Greedy forward selection on an internal stratified train/validation split.

    Each step tries every remaining candidate added to the current subset and
    keeps the best (ties to the earlier candidate). Selection stops when
    ``patience`` consecutive additions each improve the best-so-far metric by
    less than ``tolerance``, when the metric's ideal value is reached with a
    positive tolerance, when ``max_features`` is reached, or when candidates
    run out. The chosen subset is the trace prefix ending at the first
    best-ever metric. ``patience=None`` disables the patience rule.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate features")
    y = np.asarray(labels)
    _, strata = encode_labels(y)
    tr, va, _ = stratified_indices(strata, 1.0 - validation_fraction,
                                   np.random.default_rng(np.random.SeedSequence([seed, 0])))
    cols = frame.column_index(candidates)
    Xtr, Xva = frame.values[tr][:, cols], frame.values[va][:, cols]
    ytr, yva = y[tr], y[va]
    limit = len(candidates) if max_features is None else min(max_features, len(candidates))

    trace = SelectionTrace(metric=metric.name, higher_is_better=metric.higher_is_better)
    chosen: list[int] = []
    remaining = list(range(len(candidates)))
    best_so_far: Optional[float] = None
    stale = 0

    def evaluate(job) -> Optional[float]:
        step, cand = job
        subset = chosen + [cand]
        try:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, step]))
            model = factory(Xtr[:, subset], ytr, rng)
            return float(metric.fn(yva, predict(model, Xva[:, subset])))
        except Exception as e:  # a failing candidate must not end the search
            logger.warning("candidate %s skipped: %s", candidates[cand], e)
            return None

    while True:
        step = len(chosen)
        scores = parallel_map(evaluate, [(step, c) for c in remaining], threads)
        best_i, best_val = None, None
        for i, v in enumerate(scores):
            if v is not None and (best_val is None or metric.oriented(v) > metric.oriented(best_val)):
                best_i, best_val = i, v
        if best_i is None:
            trace.stop_reason = EXHAUSTED
            break
        cand = remaining.pop(best_i)
        chosen.append(cand)
        trace.steps.append((candidates[cand], best_val))
        if best_so_far is None:
            improvement = np.inf
        else:
            improvement = metric.oriented(best_val) - metric.oriented(best_so_far)
        if best_so_far is None or improvement > 0:
            best_so_far = best_val
        stale = stale + 1 if improvement < tolerance else 0
        if tolerance > 0 and best_val == metric.ideal:
            trace.stop_reason = CONVERGED
            break
        if patience is not None and stale >= patience:
            trace.stop_reason = CONVERGED
            break
        if len(chosen) >= limit:
            trace.stop_reason = MAX_REACHED if limit < len(candidates) else EXHAUSTED
            break
    if trace.steps:
        cut = int(np.argmax([metric.oriented(v) for _, v in trace.steps])) + 1
        trace.chosen = [f for f, _ in trace.steps[:cut]]
    return trace
