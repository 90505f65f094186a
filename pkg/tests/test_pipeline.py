import numpy as np
import pytest

from theftgate.frame import FeatureFrame
from theftgate.learners import ISOLATION_FOREST, HyperParams
from theftgate.metrics import f1_report, for_rate, fpr_rate
from theftgate.pipeline import (
    BENIGN_VERDICT,
    UntrainableError,
    Verdict,
    classify,
    classify_batch,
    evaluate_two_stage,
    pipeline_from_bytes,
    pipeline_to_bytes,
    train_two_stage,
)

GPS, PHOTOS, CONTACTS = 3, 4, 2
HP = HyperParams(tree_count=20, boosting_rounds=20)
CENTERS = {GPS: (10.0, 0.0), PHOTOS: (0.0, 10.0), CONTACTS: (10.0, 10.0)}


def clusters(seed=0, benign=900, per_class=30, spread=1.0):
    rng = np.random.default_rng(seed)
    parts, labels, targets = [rng.normal(0, spread, size=(benign, 2))], [0] * benign, [-1] * benign
    for t, c in CENTERS.items():
        parts.append(rng.normal(c, spread, size=(per_class, 2)))
        labels += [1] * per_class
        targets += [t] * per_class
    X = np.vstack(parts)
    n = X.shape[0]
    return FeatureFrame(["a", "b"], X, ["u01"] * n, np.arange(n) * 5000, labels, targets)


@pytest.fixture(scope="module")
def model():
    return train_two_stage(clusters(), ["a", "b"], ["a", "b"], HP, np.random.default_rng(1))


def test_no_malicious_rows_is_untrainable():
    f = clusters()
    benign = f.take(np.flatnonzero(f.label == 0))
    with pytest.raises(UntrainableError):
        train_two_stage(benign, ["a"], ["a"], HP)


def test_training_row_counts(model):
    f = clusters()
    assert all(t.n_samples[0] == len(f) for t in model.detector.trees)
    assert model.target_classifier.trees[0].n_samples[0] == int((f.label == 1).sum())
    assert any("AudioRecord" in w for w in model.warnings)


def test_benign_row_skips_stage_two(model):
    row = FeatureFrame(["a", "b"], [[0.0, 0.0]], ["u01"], [0])
    before = model.stage2_invocations
    v = classify(model, row)
    assert v == Verdict(False, None, v.stage1_score) and v.label == BENIGN_VERDICT
    assert model.stage2_invocations == before


def test_gps_cluster_row_is_flagged_as_gps(model):
    v = classify(model, FeatureFrame(["a", "b"], [[10.0, 0.0]], ["u01"], [0]))
    assert v.malicious and v.target == "GPS"
    assert sum(v.stage2_probabilities) == pytest.approx(1.0)


def test_stage_two_runs_exactly_on_flagged_rows(model):
    test = clusters(seed=5)
    before = model.stage2_invocations
    verdicts = classify_batch(model, test)
    assert model.stage2_invocations - before == int(verdicts.malicious.sum())
    assert np.all(np.isnan(verdicts.stage2_probabilities[~verdicts.malicious]))


def test_end_to_end_accuracy_is_recall_times_stage_two_accuracy(model):
    test = clusters(seed=6, spread=3.0)
    report = evaluate_two_stage(model, test)
    s1, s2, e2e = report.stage1, report.stage2.matrix, report.end_to_end.matrix
    malicious = s1.tp + s1.fn
    stage2_acc = np.trace(s2) / s2.sum()
    e2e_acc = np.trace(e2e[1:, 1:]) / malicious
    assert e2e_acc == pytest.approx(s1.tp / malicious * stage2_acc, abs=1e-12)
    assert e2e[1:, 0].sum() == s1.fn  # misses land in the Benign column


def test_perfect_models_give_perfect_report():
    f = clusters(spread=0.5)
    m = train_two_stage(f, ["a", "b"], ["a", "b"], HP, np.random.default_rng(2))
    r = evaluate_two_stage(m, f)
    assert for_rate(r.stage1) == 0.0 and fpr_rate(r.stage1) == 0.0
    assert f1_report(r.stage2).macro == 1.0


def test_flag_everything_detector():
    f = clusters(seed=3)
    m = train_two_stage(f, ["a", "b"], ["a", "b"], HP, np.random.default_rng(3))
    m.detector.classes = np.array([1, 1])  # every vote now reads as malicious
    r = evaluate_two_stage(m, f)
    assert for_rate(r.stage1) == 0.0
    assert fpr_rate(r.stage1) == pytest.approx(float(np.mean(f.label == 0)))
    assert r.stage2.matrix.sum() == int((f.label == 1).sum())
    assert r.stage2_false_alarms == int((f.label == 0).sum())


def test_isolation_forest_detector():
    f = clusters(seed=4)
    m = train_two_stage(f, ["a", "b"], ["a", "b"], HP, np.random.default_rng(4),
                        detector_kind=ISOLATION_FOREST, contamination=0.09)
    r = evaluate_two_stage(m, f)
    assert r.metadata["detector_kind"] == ISOLATION_FOREST
    assert for_rate(r.stage1) < 0.5


def test_pipeline_round_trip(model):
    raw = pipeline_to_bytes(model)
    back = pipeline_from_bytes(raw)
    assert pipeline_to_bytes(back) == raw
    test = clusters(seed=7)
    a, b = classify_batch(model, test), classify_batch(back, test)
    assert np.array_equal(a.target, b.target) and np.array_equal(a.score, b.score)


def test_verdict_invariants():
    with pytest.raises(ValueError):
        Verdict(True, None)
    with pytest.raises(ValueError):
        Verdict(False, "GPS")
    with pytest.raises(ValueError):
        Verdict(False, None, 0.1, (1.0,))
