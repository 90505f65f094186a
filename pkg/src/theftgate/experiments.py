"""Experimental protocol: stratified splits, progressive-learning curves,
class-conditional density profiles and selection convergence curves.
All tabular outputs are headered CSV, ready for any plotting tool."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from theftgate.frame import BENIGN, MALICIOUS, FeatureFrame, concat_frames
from theftgate.learners import Model, predict
from theftgate.learners.model import parallel_map
from theftgate.metrics import ConfusionCounts, UndefinedMetricError, for_rate

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.10 + 0.025 * i, 3) for i in range(33))  # 0.100 .. 0.900
MIN_BINS = 10
MAX_BINS = 4096


@dataclass(frozen=True)
class SplitInfo:
    train_fraction: float
    strata: int
    singleton_strata: tuple  # strata keys sent wholly to train


def stratify_keys(frame: FeatureFrame) -> np.ndarray:
    """Stratum id per row from (user, label, target), in first-seen order."""
    keys: dict = {}
    out = np.empty(len(frame), dtype=np.int64)
    for i, k in enumerate(zip(frame.users.tolist(), frame.label.tolist(), frame.target.tolist())):
        out[i] = keys.setdefault(k, len(keys))
    return out


def stratified_indices(strata: np.ndarray, train_fraction: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list]:
    """Train / test row indices (ascending). Each stratum of size ``n`` puts
    ``floor(p * n + 0.5)`` rows into train; a stratum of one row goes to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie strictly between 0 and 1, got {train_fraction}")
    train, singles = [], []
    order = np.argsort(strata, kind="stable")
    bounds = np.flatnonzero(np.diff(strata[order])) + 1
    for group in np.split(order, bounds):
        if not group.size:
            continue
        if group.size == 1:
            singles.append(int(strata[group[0]]))
            train.append(group)
            continue
        k = int(math.floor(train_fraction * group.size + 0.5))
        train.append(rng.permutation(group)[:k])
    train_idx = np.sort(np.concatenate(train)) if train else np.zeros(0, dtype=np.int64)
    mask = np.zeros(strata.size, dtype=bool)
    mask[train_idx] = True
    return train_idx, np.flatnonzero(~mask), singles


def stratified_split(frame: FeatureFrame, train_fraction: float = 0.75,
                     rng: Optional[np.random.Generator] = None
                     ) -> tuple[FeatureFrame, FeatureFrame, SplitInfo]:
    """Per (user, label, target) stratum, keep ``train_fraction`` of the rows
    for training (within one row). Both halves keep the input row order."""
    if rng is None:
        rng = np.random.default_rng(0)
    strata = stratify_keys(frame)
    tr, te, singles = stratified_indices(strata, train_fraction, rng)
    if singles:
        logger.info("%d single-row strata placed in train", len(singles))
    info = SplitInfo(train_fraction, int(strata.max() + 1) if strata.size else 0, tuple(singles))
    return frame.take(tr), frame.take(te), info


# -- progressive learning -----------------------------------------------------

DetectorFactory = Callable[[FeatureFrame, np.ndarray, np.random.Generator], Model]


@dataclass
class ProgressivePoint:
    users: int
    min_fraction: Optional[float]  # None when no grid point reached the threshold
    evaluated: list = field(default_factory=list)  # (fraction, FOR or None)


def _detector_for(factory: DetectorFactory, pooled: FeatureFrame, fraction: float,
                  seed: np.random.SeedSequence) -> Optional[float]:
    split_seed, fit_seed = seed.spawn(2)
    train, test, _ = stratified_split(pooled, fraction, np.random.default_rng(split_seed))
    model = factory(train, train.label.astype(np.int64), np.random.default_rng(fit_seed))
    pred = predict(model, test)
    try:
        return float(for_rate(ConfusionCounts.from_predictions(test.label == MALICIOUS,
                                                                pred == MALICIOUS)))
    except UndefinedMetricError:
        return None


def progressive_learning(frames: Sequence[FeatureFrame], factory: DetectorFactory,
                         threshold_for: float = 0.15, grid: Sequence[float] = DEFAULT_GRID,
                         seed: int = 0, threads: int = 1) -> list[ProgressivePoint]:
    """For 1..U pooled users, the smallest train fraction on ``grid`` whose
    detector reaches FOR <= ``threshold_for`` on the held-out remainder.

    The grid is scanned in ascending order and stops at the first success.
    Seeds depend only on (seed, user count, grid position), so prefixes can
    run in parallel without changing results.
    """
    if not frames:
        raise ValueError("need at least one user frame")
    grid = [float(g) for g in grid]
    if any(not 0.0 < g < 1.0 for g in grid) or grid != sorted(grid):
        raise ValueError("grid must be ascending inside (0, 1)")

    def run(u: int) -> ProgressivePoint:
        pooled = concat_frames(frames[:u])
        point = ProgressivePoint(u, None)
        for i, frac in enumerate(grid):
            value = _detector_for(factory, pooled, frac, np.random.SeedSequence([seed, u, i]))
            point.evaluated.append((frac, value))
            if value is not None and value <= threshold_for:
                point.min_fraction = frac
                break
        logger.info("users=%d min fraction=%s", u, point.min_fraction)
        return point

    return parallel_map(run, list(range(1, len(frames) + 1)), threads)


def write_progressive_csv(points: Sequence[ProgressivePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["users", "min_train_fraction"])
        for p in points:
            w.writerow([p.users, "" if p.min_fraction is None else repr(p.min_fraction)])


def write_progressive_trace_csv(points: Sequence[ProgressivePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["users", "train_fraction", "for_rate"])
        for p in points:
            for frac, value in p.evaluated:
                w.writerow([p.users, repr(frac), "" if value is None else repr(value)])


# -- density profiles ---------------------------------------------------------

@dataclass
class DensityProfile:
    feature: str
    edges: np.ndarray
    benign: np.ndarray  # fraction of benign non-null values per bin
    malicious: np.ndarray

    @property
    def overlap(self) -> float:
        return float(np.minimum(self.benign, self.malicious).sum())


def fd_width(x: np.ndarray) -> float:
    """Freedman-Diaconis bin width 2 * IQR * n^(-1/3)."""
    q75, q25 = np.percentile(x, [75, 25])
    return 2.0 * (q75 - q25) * x.size ** (-1.0 / 3.0)


def density_profile(frame: FeatureFrame, features: Sequence[str]) -> list[DensityProfile]:
    """Class-conditional normalized histograms on a shared grid per feature.

    The bin width is the coarser of the two per-class Freedman-Diaconis
    widths, with at least 10 bins across the pooled range. Features with no
    non-null value in either class are skipped with a notice.
    """
    if not frame.is_labeled:
        raise ValueError("density profiles need a labeled frame")
    idx = frame.column_index(features)
    out = []
    for name, j in zip(features, idx):
        col = frame.values[:, j]
        parts = [col[(frame.label == c) & ~np.isnan(col)] for c in (BENIGN, MALICIOUS)]
        if any(p.size == 0 for p in parts):
            logger.info("skipping %s: no non-null values in one class", name)
            continue
        lo = float(min(p.min() for p in parts))
        hi = float(max(p.max() for p in parts))
        if hi == lo:
            edges = np.array([lo - 0.5, lo + 0.5])
        else:
            width = max(fd_width(p) for p in parts)
            bins = MIN_BINS if width <= 0 else int(math.ceil((hi - lo) / width))
            edges = np.linspace(lo, hi, min(max(bins, MIN_BINS), MAX_BINS) + 1)
        hists = [np.histogram(p, bins=edges)[0] / p.size for p in parts]
        out.append(DensityProfile(name, edges, hists[0], hists[1]))
    return out


def write_density_csv(profiles: Sequence[DensityProfile], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "bin_left", "bin_right", "benign", "malicious"])
        for p in profiles:
            for b in range(p.benign.size):
                w.writerow([p.feature, repr(float(p.edges[b])), repr(float(p.edges[b + 1])),
                            repr(float(p.benign[b])), repr(float(p.malicious[b]))])


def write_overlap_csv(profiles: Sequence[DensityProfile], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "bins", "overlap"])
        for p in profiles:
            w.writerow([p.feature, p.benign.size, repr(p.overlap)])


# -- convergence curves -------------------------------------------------------

def convergence_curve(trace) -> list[tuple]:
    """Rows of (step, feature, metric, best_so_far) for a selection trace."""
    if not trace.steps:
        raise ValueError("empty selection trace")
    better = max if trace.higher_is_better else min
    rows, best = [], None
    for step, (feature, metric) in enumerate(trace.steps, start=1):
        best = metric if best is None else better(best, metric)
        rows.append((step, feature, metric, best))
    return rows


def write_convergence_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "feature", "metric", "best_so_far"])
        for step, feature, metric, best in convergence_curve(trace):
            w.writerow([step, feature, repr(float(metric)), repr(float(best))])
