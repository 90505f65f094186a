import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from theftgate.frame import FeatureFrame, FrameFormatError
from theftgate.learners import (
    EXTRA_TREES,
    HyperParams,
    TreeEnsemble,
    UnsupportedModelError,
    anomaly_score,
    fit_boosted,
    fit_by_kind,
    fit_extra_trees,
    fit_isolation_forest,
    fit_knn,
    fit_random_forest,
    fit_tree,
    importance,
    model_from_bytes,
    model_to_bytes,
    predict,
    predict_knn,
    predict_proba,
)
from theftgate.learners._tree import TreeBuilder, gini_score
from theftgate.learners.iforest import average_path_length, mean_path_length
from theftgate.telemetry import SchemaError

DEEP = HyperParams(min_leaf=1, max_depth=64)


def _blobs(n=200, seed=0, gap=6.0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, 2)) + gap * y[:, None]
    return X, y


# -- single tree --------------------------------------------------------------

def test_pure_frame_gives_single_leaf():
    model = fit_tree(np.arange(10.0), np.ones(10, dtype=int), DEEP)
    assert model.trees[0].node_count == 1


def test_midpoint_threshold():
    model = fit_tree(np.array([1.0, 2.0, 8.0, 9.0]), np.array([0, 0, 1, 1]), DEEP)
    assert model.trees[0].threshold[0] == 5.0
    assert predict(model, np.array([1.0, 2.0, 8.0, 9.0])).tolist() == [0, 0, 1, 1]


def test_gini_of_balanced_node_is_half():
    counts = [np.array(2.0), np.array(2.0), np.array(4.0)]
    assert 1.0 - float(gini_score(counts)) / 4.0 == 0.5


def test_missing_values_follow_learned_direction():
    X = np.array([1.0, 2.0, np.nan, np.nan, 8.0, 9.0])
    y = np.array([0, 0, 1, 1, 1, 1])
    model = fit_tree(X, y, DEEP)
    assert predict(model, X).tolist() == y.tolist()
    assert predict(model, np.array([np.nan])).tolist() == [1]


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 4)),
                  elements=st.floats(-100, 100)), st.integers(0, 2**31))
def test_unpruned_tree_memorizes_distinct_rows(X, seed):
    _, idx = np.unique(X, axis=0, return_index=True)
    X = X[np.sort(idx)]
    y = np.random.default_rng(seed).integers(0, 3, size=X.shape[0])
    assert np.array_equal(predict(fit_tree(X, y, DEEP), X), y)


# -- forests ------------------------------------------------------------------

@pytest.mark.parametrize("fit", [fit_extra_trees, fit_random_forest])
def test_forests_separate_blobs(fit):
    X, y = _blobs()
    model = fit(X, y, HyperParams(tree_count=50), np.random.default_rng(1))
    assert np.array_equal(predict(model, X), y)


def test_single_extra_tree_agrees_with_cart_on_separable_data():
    X = np.array([0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0])
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    hp = HyperParams(tree_count=1, feature_subsample=1.0, min_leaf=1)
    et = fit_extra_trees(X, y, hp, np.random.default_rng(3))
    grid = np.linspace(-1, 14, 31)
    cart = fit_tree(X, y, hp)
    assert np.array_equal(predict(et, X), predict(cart, X))
    assert predict(et, grid[:5]).tolist() == [0] * 5 and predict(et, grid[-5:]).tolist() == [1] * 5


def test_vote_tie_goes_to_lowest_class():
    trees = []
    for value in ([1.0, 0.0], [0.0, 1.0]):
        b = TreeBuilder(2)
        b.add(1, value)
        trees.append(b.build())
    model = TreeEnsemble(EXTRA_TREES, trees, np.array([0, 1]), ["f0"], HyperParams())
    assert predict(model, np.zeros((3, 1))).tolist() == [0, 0, 0]


@pytest.mark.parametrize("kind", ["extraTrees", "randomForest", "gradientBoosted"])
def test_thread_count_does_not_change_models(kind):
    X, y = _blobs(120, gap=1.0)
    hp = HyperParams(tree_count=8, boosting_rounds=5)
    a = fit_by_kind(kind, X, y, hp, np.random.default_rng(4), threads=1)
    b = fit_by_kind(kind, X, y, hp, np.random.default_rng(4), threads=4)
    assert model_to_bytes(a) == model_to_bytes(b)


# -- boosting -----------------------------------------------------------------

def test_zero_rounds_predicts_prior():
    y = np.array([1, 0, 0, 0] * 5)
    model = fit_boosted(np.arange(20.0), y, HyperParams(boosting_rounds=0))
    assert np.allclose(predict_proba(model, np.arange(20.0))[:, 1], 0.25, atol=1e-12)


def test_one_round_leaf_values_are_newton_steps():
    X = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([0, 0, 1, 1])
    hp = HyperParams(boosting_rounds=1, boost_max_depth=1, min_leaf=1, l2_leaf=1.0,
                     learning_rate=0.1)
    tree = fit_boosted(X, y, hp).trees[0]
    # prior 0 -> p = 0.5: g = +-0.5, h = 0.25; each leaf G = +-1, H = 0.5
    left, right = tree.left[0], tree.right[0]
    assert tree.threshold[0] == 2.5
    assert tree.value[left, 0] == pytest.approx(-0.1 * 1.0 / 1.5, abs=1e-15)
    assert tree.value[right, 0] == pytest.approx(0.1 * 1.0 / 1.5, abs=1e-15)


def test_multiclass_loss_is_non_increasing():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 4))
    y = np.digitize(X[:, 0] + X[:, 1], [-0.5, 0.5])
    trace: list = []
    fit_boosted(X, y, HyperParams(boosting_rounds=15, boost_max_depth=3), loss_trace=trace)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_histogram_mode_matches_exact_with_few_distinct_values():
    rng = np.random.default_rng(5)
    X = rng.integers(0, 12, size=(300, 3)).astype(float)
    y = (X[:, 0] + rng.integers(0, 4, size=300) > 7).astype(int)
    exact = fit_boosted(X, y, HyperParams(boosting_rounds=5))
    hist = fit_boosted(X, y, HyperParams(boosting_rounds=5, histogram_bins=64))
    assert np.allclose(predict_proba(exact, X), predict_proba(hist, X), atol=1e-12)


def test_absent_classes_are_never_predicted():
    X, y = _blobs(60)
    model = fit_boosted(X, y * 2, HyperParams(boosting_rounds=5), classes=[0, 1, 2])
    proba = predict_proba(model, X)
    assert proba.shape == (60, 3) and np.all(proba[:, 1] < 1e-9)


# -- importance ---------------------------------------------------------------

def test_importance_ranks_signal_first_and_constant_last():
    rng = np.random.default_rng(6)
    n = 300
    y = rng.integers(0, 2, size=n)
    X = np.column_stack([rng.normal(size=(n, 10)), y * 3.0 + rng.normal(0, 0.1, n), np.ones(n)])
    names = [f"noise{i}" for i in range(10)] + ["signal", "constant"]
    frame = FeatureFrame(names, X, ["u"] * n, np.arange(n))
    ranked = importance(fit_boosted(frame, y, HyperParams(boosting_rounds=10)))
    assert ranked[0][0] == "signal"
    assert dict(ranked)["constant"] == 0.0


def test_importance_rejects_knn():
    X, y = _blobs(20)
    with pytest.raises(UnsupportedModelError):
        importance(fit_knn(X, y))


# -- isolation forest ---------------------------------------------------------

def test_average_path_length_values():
    assert average_path_length(1) == 0.0
    assert average_path_length(2) == pytest.approx(1.0)
    harmonic_255 = sum(1.0 / i for i in range(1, 256))
    assert average_path_length(256) == pytest.approx(2 * harmonic_255 - 2 * 255 / 256)


def test_root_isolated_point_has_path_length_one():
    X = np.array([[0.0], [1.0]])
    model = fit_isolation_forest(X, HyperParams(tree_count=1, iso_subsample_size=2),
                                 np.random.default_rng(0))
    assert mean_path_length(model, X).tolist() == [1.0, 1.0]


def test_planted_outlier_gets_top_score():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(size=(200, 3)), [[100.0, 100.0, 100.0]]])
    model = fit_isolation_forest(X, HyperParams(), np.random.default_rng(8))
    s = [anomaly_score(model, row) for row in X]
    assert int(np.argmax(s)) == 200 and all(0.0 < v < 1.0 for v in s)


# -- kNN ----------------------------------------------------------------------

def test_knn_hand_layout():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    y = np.array([0, 0, 1])
    assert predict_knn(fit_knn(X, y, HyperParams(knn_k=3)), [0.0, 0.4]) == 0
    assert predict_knn(fit_knn(X, y, HyperParams(knn_k=1)), [5.0, 5.0]) == 1


def test_knn_with_k_equal_to_rows_is_global_majority():
    X, y = _blobs(30)
    y = np.array([1] * 20 + [0] * 10)
    model = fit_knn(X, y, HyperParams(knn_k=30))
    assert set(predict(model, X).tolist()) == {1}


def test_knn_rejects_k_above_rows():
    with pytest.raises(ValueError):
        fit_knn(np.zeros((3, 1)), [0, 1, 0], HyperParams(knn_k=4))


# -- shared predict surface ---------------------------------------------------

@pytest.mark.parametrize("kind", ["singleTree", "extraTrees", "randomForest",
                                  "gradientBoosted", "knn"])
def test_probabilities_sum_to_one_and_rows_are_independent(kind):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(1000, 3))
    y = np.digitize(X[:, 0], [-0.3, 0.4])
    model = fit_by_kind(kind, X[:300], y[:300], HyperParams(tree_count=10, boosting_rounds=5),
                        np.random.default_rng(1))
    proba = predict_proba(model, X)
    assert np.allclose(proba.sum(1), 1.0, atol=1e-9)
    perm = rng.permutation(1000)
    assert np.array_equal(predict(model, X[perm]), predict(model, X)[perm])


def test_schema_mismatch_is_rejected():
    frame = FeatureFrame(["a", "b"], np.zeros((4, 2)), ["u"] * 4, np.arange(4))
    model = fit_tree(frame, [0, 1, 0, 1], DEEP)
    with pytest.raises(SchemaError):
        predict(model, frame.select(["b", "a"]))
    raw = model_to_bytes(model)
    with pytest.raises(SchemaError):
        model_from_bytes(raw, ["a", "c"])
    with pytest.raises(FrameFormatError):
        model_from_bytes(b"NOPE" + raw[4:])


def test_hyperparameter_validation():
    for bad in (dict(tree_count=0), dict(histogram_bins=1), dict(feature_subsample=1.5),
                dict(boosting_rounds=-1)):
        with pytest.raises(ValueError):
            HyperParams(**bad)
