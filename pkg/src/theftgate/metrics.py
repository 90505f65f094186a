"""Confusion accounting and detection / target-classification metrics.

Malicious is the positive class. Two rates keep the names used by the
detection literature this package follows, even though they differ from
textbook usage:

* ``for_rate`` = fn / (tp + fn): the share of malicious rows missed
  (the textbook false-negative rate).
* ``fpr_rate`` = fp / (tp + fp): the share of alarms that are false
  (the textbook false-discovery rate).

The textbook rates are exposed separately as ``false_negative_rate``,
``false_positive_rate`` (benign denominator) and ``false_discovery_rate``.
All arithmetic runs on :class:`fractions.Fraction`; pass ``exact=True`` to
get the fraction itself instead of a float.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

Number = Union[float, Fraction]


class UndefinedMetricError(ZeroDivisionError):
    """A rate whose denominator is zero."""


def _ratio(num: int, den: int, what: str, exact: bool) -> Number:
    if den == 0:
        raise UndefinedMetricError(f"{what} is undefined: zero denominator")
    q = Fraction(num, den)
    return q if exact else float(q)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        if t.shape != p.shape:
            raise ValueError(f"{t.shape} truths vs {p.shape} predictions")
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)),
                   int(np.sum(~t & ~p)), int(np.sum(t & ~p)))

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def for_rate(c: ConfusionCounts, exact: bool = False) -> Number:
    """Malicious rows predicted benign over all malicious rows."""
    return _ratio(c.fn, c.tp + c.fn, "for_rate", exact)


def fpr_rate(c: ConfusionCounts, exact: bool = False) -> Number:
    """Benign rows predicted malicious over all malicious predictions."""
    return _ratio(c.fp, c.tp + c.fp, "fpr_rate", exact)


def false_negative_rate(c: ConfusionCounts, exact: bool = False) -> Number:
    return _ratio(c.fn, c.tp + c.fn, "false_negative_rate", exact)


def false_positive_rate(c: ConfusionCounts, exact: bool = False) -> Number:
    return _ratio(c.fp, c.fp + c.tn, "false_positive_rate", exact)


def false_discovery_rate(c: ConfusionCounts, exact: bool = False) -> Number:
    return _ratio(c.fp, c.tp + c.fp, "false_discovery_rate", exact)


def recall(c: ConfusionCounts, exact: bool = False) -> Number:
    return _ratio(c.tp, c.tp + c.fn, "recall", exact)


@dataclass(frozen=True)
class MultiClassConfusion:
    """``matrix[i, j]`` counts rows of true class ``classes[i]`` predicted ``classes[j]``."""

    classes: tuple
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix)
        k = len(self.classes)
        if m.shape != (k, k):
            raise ValueError(f"matrix shape {m.shape} does not match {k} classes")
        if np.any(m < 0) or not np.all(m == np.floor(m)):
            raise ValueError("confusion entries must be non-negative integers")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "matrix", m.astype(np.int64))

    @property
    def support(self) -> np.ndarray:
        return self.matrix.sum(1)

    @classmethod
    def from_predictions(cls, classes: Sequence, y_true, y_pred) -> "MultiClassConfusion":
        pos = {c: i for i, c in enumerate(classes)}
        m = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t, p in zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()):
            m[pos[t], pos[p]] += 1
        return cls(tuple(classes), m)

    def __add__(self, other: "MultiClassConfusion") -> "MultiClassConfusion":
        if self.classes != other.classes:
            raise ValueError("cannot add confusions over different classes")
        return MultiClassConfusion(self.classes, self.matrix + other.matrix)


@dataclass(frozen=True)
class F1Report:
    classes: tuple
    f1: tuple  # per class, in class order
    support: tuple
    macro: Number

    def to_dict(self) -> dict:
        return {
            "per_class": [
                {"class": str(c), "f1": float(f), "support": int(s)}
                for c, f, s in zip(self.classes, self.f1, self.support)
            ],
            "macro_f1": float(self.macro),
        }


def f1_report(m: MultiClassConfusion, exact: bool = False) -> F1Report:
    """Per-class F1 = 2tp / (2tp + fp + fn), which equals 2PR/(P+R) and is 0
    when precision or recall is undefined. The macro average skips classes
    with zero support."""
    M = m.matrix
    if M.sum() == 0:
        raise UndefinedMetricError("f1_report needs at least one evaluated row")
    support = M.sum(1)
    predicted = M.sum(0)
    f1s = []
    for i in range(len(m.classes)):
        tp = int(M[i, i])
        den = int(support[i]) + int(predicted[i])  # = 2tp + fp + fn
        f1s.append(Fraction(2 * tp, den) if den else Fraction(0))
    populated = [f for f, s in zip(f1s, support) if s > 0]
    if not populated:
        raise UndefinedMetricError("no class has support")
    macro = sum(populated, Fraction(0)) / len(populated)
    conv = (lambda q: q) if exact else float
    return F1Report(m.classes, tuple(conv(f) for f in f1s),
                    tuple(int(s) for s in support), conv(macro))


def _maybe(fn, c: ConfusionCounts) -> Optional[float]:
    try:
        return float(fn(c))
    except UndefinedMetricError:
        return None


def detection_summary(c: ConfusionCounts) -> dict:
    """Counts plus every rate; undefined rates are ``None``."""
    return {
        "counts": c.to_dict(),
        "for_rate": _maybe(for_rate, c),
        "fpr_rate": _maybe(fpr_rate, c),
        "false_negative_rate": _maybe(false_negative_rate, c),
        "false_positive_rate": _maybe(false_positive_rate, c),
        "false_discovery_rate": _maybe(false_discovery_rate, c),
    }


def classification_summary(m: MultiClassConfusion) -> dict:
    out = {
        "classes": [str(c) for c in m.classes],
        "matrix": m.matrix.tolist(),
    }
    try:
        out.update(f1_report(m).to_dict())
    except UndefinedMetricError:
        out.update(per_class=[], macro_f1=None)
    return out
