"""Two-stage cascade: a binary detector gates a six-way target classifier.

``pipeline.bin`` layout (little-endian)::

    b"TGP1", u32 format version
    u32 header length, UTF-8 JSON header (feature lists, warnings)
    u64 length + detector model.bin bytes
    u64 length + target classifier model.bin bytes
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from theftgate.frame import (
    BENIGN,
    MALICIOUS,
    NO_TARGET,
    TARGET_CLASSES,
    BinaryReader,
    FeatureFrame,
    FrameFormatError,
)
from theftgate.learners import (
    EXTRA_TREES,
    GRADIENT_BOOSTED,
    ISOLATION_FOREST,
    HyperParams,
    Model,
    fit_by_kind,
    fit_isolation_forest,
    model_from_bytes,
    model_to_bytes,
    predict,
    predict_proba,
)
from theftgate.learners.iforest import predict_anomalous, scores
from theftgate.metrics import (
    ConfusionCounts,
    MultiClassConfusion,
    classification_summary,
    detection_summary,
)
from theftgate.telemetry import SchemaError

logger = logging.getLogger(__name__)

PIPELINE_MAGIC = b"TGP1"
FORMAT_VERSION = 1
BENIGN_VERDICT = "Benign"
TARGET_IDS = tuple(range(len(TARGET_CLASSES)))


class UntrainableError(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    malicious: bool
    target: Optional[str] = None
    stage1_score: float = 0.0
    stage2_probabilities: Optional[tuple] = None

    def __post_init__(self) -> None:
        if self.malicious != (self.target is not None):
            raise ValueError("a verdict carries a target exactly when it is malicious")
        if not self.malicious and self.stage2_probabilities is not None:
            raise ValueError("benign verdicts never reach stage 2")

    @property
    def label(self) -> str:
        return self.target if self.malicious else BENIGN_VERDICT


@dataclass
class TwoStageModel:
    detector: Model
    target_classifier: Model
    detector_features: list
    target_features: list
    warnings: list = field(default_factory=list)
    stage2_invocations: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def _count_stage2(self, rows: int) -> None:
        with self._lock:
            self.stage2_invocations += rows


def train_two_stage(frame: FeatureFrame, detector_features: Sequence[str],
                    target_features: Sequence[str], hp: HyperParams = HyperParams(),
                    rng: Optional[np.random.Generator] = None,
                    detector_kind: str = EXTRA_TREES,
                    classifier_kind: str = GRADIENT_BOOSTED,
                    target_hp: Optional[HyperParams] = None,
                    contamination: float = 0.1,
                    threads: int = 1) -> TwoStageModel:
    """Detector on every row over ``detector_features``; target classifier on
    the ground-truth malicious rows only, over ``target_features``."""
    if rng is None:
        rng = np.random.default_rng(0)
    if not frame.is_labeled:
        raise UntrainableError("training frame must be fully labeled")
    malicious = frame.label == MALICIOUS
    if not malicious.any():
        raise UntrainableError("no malicious rows: the target classifier cannot be trained")
    if np.any(frame.target[malicious] == NO_TARGET):
        raise UntrainableError("every malicious row needs a target class")
    det_frame = frame.select(list(detector_features))
    tgt_frame = frame.select(list(target_features)).take(np.flatnonzero(malicious))
    det_seed, tgt_seed = (np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, size=2))
    if detector_kind == ISOLATION_FOREST:
        detector = fit_isolation_forest(det_frame, hp, det_seed, contamination, threads)
    else:
        detector = fit_by_kind(detector_kind, det_frame, frame.label.astype(np.int64), hp,
                               det_seed, classes=[BENIGN, MALICIOUS], threads=threads)
    warnings = []
    counts = np.bincount(tgt_frame.target, minlength=len(TARGET_CLASSES))
    for k, c in enumerate(counts):
        if c == 0:
            msg = f"target class {TARGET_CLASSES[k]} has no training rows and can never be predicted"
            logger.warning(msg)
            warnings.append(msg)
    classifier = fit_by_kind(classifier_kind, tgt_frame, tgt_frame.target.astype(np.int64),
                             target_hp or hp, tgt_seed, classes=TARGET_IDS, threads=threads)
    return TwoStageModel(detector, classifier, list(detector_features), list(target_features),
                         warnings)


def _subframe(frame: FeatureFrame, names: Sequence[str]) -> FeatureFrame:
    missing = [c for c in names if c not in frame.columns]
    if missing:
        raise SchemaError(f"frame lacks model columns: {missing}")
    return frame.select(list(names))


@dataclass
class BatchVerdicts:
    """Column-wise verdicts for a frame; ``target`` is -1 on benign rows."""

    malicious: np.ndarray
    target: np.ndarray
    score: np.ndarray
    stage2_probabilities: np.ndarray  # (rows, 6), NaN on benign rows

    def verdict(self, i: int) -> Verdict:
        if not self.malicious[i]:
            return Verdict(False, None, float(self.score[i]))
        return Verdict(True, TARGET_CLASSES[self.target[i]], float(self.score[i]),
                       tuple(float(p) for p in self.stage2_probabilities[i]))


def classify_batch(model: TwoStageModel, frame: FeatureFrame) -> BatchVerdicts:
    det = _subframe(frame, model.detector_features)
    tgt = _subframe(frame, model.target_features)
    if model.detector.kind == ISOLATION_FOREST:
        score = scores(model.detector, det.values)
        flagged = predict_anomalous(model.detector, det.values)
    else:
        score = predict_proba(model.detector, det)[:, 1]
        flagged = predict(model.detector, det) == MALICIOUS
    n = len(frame)
    target = np.full(n, NO_TARGET, dtype=np.int64)
    probs = np.full((n, len(TARGET_CLASSES)), np.nan)
    rows = np.flatnonzero(flagged)
    if rows.size:
        model._count_stage2(int(rows.size))
        sub = tgt.take(rows)
        probs[rows] = predict_proba(model.target_classifier, sub)
        target[rows] = predict(model.target_classifier, sub)
    return BatchVerdicts(flagged.astype(bool), target, score, probs)


def classify(model: TwoStageModel, frame: FeatureFrame, row: int = 0) -> Verdict:
    """Verdict for one row of ``frame``; stage 2 runs only if stage 1 flags it."""
    return classify_batch(model, frame.take([row])).verdict(0)


@dataclass
class TwoStageReport:
    stage1: ConfusionCounts
    stage2: MultiClassConfusion  # flagged rows that are truly malicious
    stage2_false_alarms: int  # flagged rows that are truly benign
    end_to_end: MultiClassConfusion  # every truly malicious row, misses as Benign
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage1": detection_summary(self.stage1),
            "stage2": {**classification_summary(self.stage2),
                       "flagged_benign_rows": self.stage2_false_alarms},
            "end_to_end": classification_summary(self.end_to_end),
            "metadata": self.metadata,
        }


def evaluate_two_stage(model: TwoStageModel, test: FeatureFrame,
                       verdicts: Optional[BatchVerdicts] = None) -> TwoStageReport:
    if not test.is_labeled:
        raise ValueError("test frame must be fully labeled")
    v = verdicts if verdicts is not None else classify_batch(model, test)
    truth = test.label == MALICIOUS
    stage1 = ConfusionCounts.from_predictions(truth, v.malicious)
    hit = v.malicious & truth
    stage2 = MultiClassConfusion.from_predictions(TARGET_IDS, test.target[hit], v.target[hit])
    e2e_classes = (-1,) + TARGET_IDS
    pred = np.where(v.malicious, v.target, -1)
    end_to_end = MultiClassConfusion.from_predictions(e2e_classes, test.target[truth], pred[truth])
    names = (BENIGN_VERDICT,) + TARGET_CLASSES
    return TwoStageReport(
        stage1,
        MultiClassConfusion(TARGET_CLASSES, stage2.matrix),
        int(np.sum(v.malicious & ~truth)),
        MultiClassConfusion(names, end_to_end.matrix),
        {
            "detector_kind": model.detector.kind,
            "classifier_kind": model.target_classifier.kind,
            "detector_features": list(model.detector_features),
            "target_features": list(model.target_features),
            "detector_hyperparameters": model.detector.hp.to_dict(),
            "classifier_hyperparameters": model.target_classifier.hp.to_dict(),
            "detector_seed": getattr(model.detector, "seed", None),
            "classifier_seed": getattr(model.target_classifier, "seed", None),
            "test_rows": len(test),
            "warnings": list(model.warnings),
        },
    )


def write_verdicts_csv(frame: FeatureFrame, v: BatchVerdicts, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "t_ms", "verdict", "target", "score"])
        for i in range(len(frame)):
            mal = bool(v.malicious[i])
            w.writerow([frame.users[i], int(frame.t_ms[i]),
                        "malicious" if mal else "benign",
                        TARGET_CLASSES[v.target[i]] if mal else "",
                        repr(float(v.score[i]))])


def pipeline_to_bytes(model: TwoStageModel) -> bytes:
    header = json.dumps({
        "detector_features": model.detector_features,
        "target_features": model.target_features,
        "warnings": model.warnings,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [PIPELINE_MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for m in (model.detector, model.target_classifier):
        raw = model_to_bytes(m)
        out += [struct.pack("<Q", len(raw)), raw]
    return b"".join(out)


def pipeline_from_bytes(data: bytes) -> TwoStageModel:
    r = BinaryReader(data)
    if r.take(4) != PIPELINE_MAGIC:
        raise FrameFormatError("not a pipeline container (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FrameFormatError(f"unsupported pipeline format version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    models = []
    for names in (header["detector_features"], header["target_features"]):
        (size,) = r.unpack("<Q")
        models.append(model_from_bytes(r.take(size), names))
    if r.pos != len(data):
        raise FrameFormatError("trailing bytes after pipeline payload")
    return TwoStageModel(models[0], models[1], header["detector_features"],
                         header["target_features"], header["warnings"])


def save_pipeline(model: TwoStageModel, path) -> None:
    Path(path).write_bytes(pipeline_to_bytes(model))


def load_pipeline(path) -> TwoStageModel:
    return pipeline_from_bytes(Path(path).read_bytes())
