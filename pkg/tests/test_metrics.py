from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from theftgate.metrics import (
    ConfusionCounts,
    MultiClassConfusion,
    UndefinedMetricError,
    classification_summary,
    detection_summary,
    f1_report,
    false_positive_rate,
    for_rate,
    fpr_rate,
    recall,
)

counts = st.builds(ConfusionCounts, *(st.integers(0, 10_000) for _ in range(4)))


def test_for_rate_examples():
    assert for_rate(ConfusionCounts(tp=100, fp=0, tn=0, fn=0)) == 0.0
    assert for_rate(ConfusionCounts(tp=90, fp=0, tn=0, fn=10), exact=True) == Fraction(1, 10)


def test_fpr_rate_examples():
    assert fpr_rate(ConfusionCounts(tp=50, fp=0, tn=7, fn=0)) == 0.0
    assert fpr_rate(ConfusionCounts(tp=49, fp=1, tn=0, fn=0), exact=True) == Fraction(1, 50)


def test_fpr_rate_differs_from_conventional_false_positive_rate():
    c = ConfusionCounts(tp=49, fp=1, tn=99, fn=0)
    assert fpr_rate(c, exact=True) == Fraction(1, 50)
    assert false_positive_rate(c, exact=True) == Fraction(1, 100)


def test_zero_denominators_raise():
    with pytest.raises(UndefinedMetricError):
        for_rate(ConfusionCounts(0, 3, 3, 0))
    with pytest.raises(UndefinedMetricError):
        fpr_rate(ConfusionCounts(0, 0, 3, 3))
    summary = detection_summary(ConfusionCounts(0, 0, 3, 3))
    assert summary["for_rate"] == 1.0 and summary["fpr_rate"] is None


def test_counts_validation_and_sum():
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)
    assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)
    c = ConfusionCounts.from_predictions([1, 1, 0, 0, 1], [1, 0, 1, 0, 1])
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)


@given(counts)
def test_rates_lie_in_unit_interval(c):
    for fn in (for_rate, fpr_rate, recall):
        try:
            assert 0.0 <= fn(c) <= 1.0
        except UndefinedMetricError:
            pass


@given(counts)
def test_for_rate_plus_recall_is_one(c):
    if c.tp + c.fn:
        assert for_rate(c, exact=True) + recall(c, exact=True) == 1


def test_f1_two_class_hand_computation():
    r = f1_report(MultiClassConfusion((0, 1), np.array([[8, 2], [1, 9]])), exact=True)
    assert r.f1 == (Fraction(16, 19), Fraction(6, 7))
    assert r.macro == Fraction(113, 133)
    assert r.support == (10, 10)


def test_perfect_diagonal():
    r = f1_report(MultiClassConfusion(("a", "b", "c"), np.diag([3, 4, 5])))
    assert r.f1 == (1.0, 1.0, 1.0) and r.macro == 1.0


def test_macro_skips_unsupported_classes():
    m = np.array([[5, 0, 0], [0, 0, 0], [1, 0, 4]])
    r = f1_report(MultiClassConfusion((0, 1, 2), m), exact=True)
    assert r.f1[1] == 0
    assert r.macro == (Fraction(10, 11) + Fraction(8, 9)) / 2


def test_empty_matrix_is_undefined():
    with pytest.raises(UndefinedMetricError):
        f1_report(MultiClassConfusion((0, 1), np.zeros((2, 2))))


@given(hnp.arrays(np.int64, st.integers(1, 6).map(lambda k: (k, k)), elements=st.integers(0, 50)))
def test_f1_bounds(m):
    if m.sum() == 0:
        return
    r = f1_report(MultiClassConfusion(tuple(range(m.shape[0])), m))
    assert all(0.0 <= f <= 1.0 for f in r.f1) and 0.0 <= r.macro <= 1.0


def test_multiclass_from_predictions_and_summary():
    m = MultiClassConfusion.from_predictions(("x", "y"), ["x", "y", "y"], ["x", "x", "y"])
    assert m.matrix.tolist() == [[1, 0], [1, 1]]
    assert (m + m).matrix.tolist() == [[2, 0], [2, 2]]
    s = classification_summary(m)
    assert s["classes"] == ["x", "y"] and s["macro_f1"] == pytest.approx((2 / 3 + 2 / 3) / 2)
