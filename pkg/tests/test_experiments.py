import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from theftgate.experiments import (
    DEFAULT_GRID,
    convergence_curve,
    density_profile,
    progressive_learning,
    stratified_split,
    write_convergence_csv,
    write_density_csv,
)
from theftgate.featsel import SelectionTrace
from theftgate.frame import FeatureFrame
from theftgate.learners import HyperParams, fit_tree
from theftgate.synthgen import SynthConfig, generate


def _frame(users, labels, targets=None, values=None):
    n = len(users)
    values = np.zeros((n, 1)) if values is None else values
    return FeatureFrame(["x"], values, np.array(users, dtype=object), np.arange(n), labels,
                        targets if targets is not None else [3 if l == 1 else -1 for l in labels])


def test_single_stratum_split():
    f = _frame(["u01"] * 100, [0] * 100)
    train, test, info = stratified_split(f, 0.75, np.random.default_rng(0))
    assert (len(train), len(test)) == (75, 25) and info.strata == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1)), min_size=2, max_size=300),
       st.floats(0.05, 0.95), st.integers(0, 1000))
def test_every_stratum_within_one_row(keys, p, seed):
    users = [f"u{u}" for u, _ in keys]
    labels = [l for _, l in keys]
    f = _frame(users, labels)
    train, test, _ = stratified_split(f, p, np.random.default_rng(seed))
    assert len(train) + len(test) == len(f)
    for key in set(keys):
        total = sum(1 for k in keys if k == key)
        got = sum(1 for u, l in zip(train.users, train.label) if (u, l) == (f"u{key[0]}", key[1]))
        expected = total if total == 1 else p * total
        assert abs(got - expected) <= 1


def test_split_is_reproducible_and_order_preserving():
    f = _frame(["u1", "u2"] * 50, [0, 1] * 50)
    a = stratified_split(f, 0.6, np.random.default_rng(3))
    b = stratified_split(f, 0.6, np.random.default_rng(3))
    assert a[0].t_ms.tolist() == b[0].t_ms.tolist()
    assert a[0].t_ms.tolist() == sorted(a[0].t_ms.tolist())


@pytest.mark.parametrize("p", [0.0, 1.0, -0.2])
def test_degenerate_fraction_rejected(p):
    with pytest.raises(ValueError):
        stratified_split(_frame(["u"] * 4, [0] * 4), p)


def test_progressive_threshold_one_stops_at_first_grid_point():
    rng = np.random.default_rng(0)
    frames = []
    for u in range(3):
        y = np.array([0] * 40 + [1] * 10)
        frames.append(_frame([f"u{u}"] * 50, y, values=rng.normal(size=(50, 1))))
    points = progressive_learning(frames, lambda f, y, r: fit_tree(f, y, HyperParams()), 1.0)
    assert [p.min_fraction for p in points] == [DEFAULT_GRID[0]] * 3
    assert all(len(p.evaluated) == 1 for p in points)


def test_progressive_grid_validation():
    f = _frame(["u"] * 4, [0, 1, 0, 1])
    with pytest.raises(ValueError):
        progressive_learning([f], lambda *a: None, grid=[0.5, 0.2])
    with pytest.raises(ValueError):
        progressive_learning([], lambda *a: None)


def test_density_identical_and_disjoint():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4000)
    same = _frame(["u"] * 4000, [0, 1] * 2000, values=np.column_stack([np.repeat(x[:2000], 2)]))
    (profile,) = density_profile(same, ["x"])
    assert profile.overlap == pytest.approx(1.0)
    y = np.array([0, 1] * 2000)
    apart = _frame(["u"] * 4000, y, values=(rng.random(4000) + 5.0 * y)[:, None])
    (profile,) = density_profile(apart, ["x"])
    assert profile.overlap == 0.0
    assert profile.benign.sum() == pytest.approx(1.0) and profile.malicious.sum() == pytest.approx(1.0)


def test_generator_overlap_calibration():
    data = generate(SynthConfig(overlap=0.8, seed=5, users=2))
    profiles = density_profile(data.frame, data.layout.informative_columns)
    assert 0.7 <= float(np.mean([p.overlap for p in profiles])) <= 0.9


def test_density_csv(tmp_path):
    f = _frame(["u"] * 6, [0, 0, 0, 1, 1, 1], values=np.arange(6.0)[:, None])
    write_density_csv(density_profile(f, ["x"]), tmp_path / "d.csv")
    rows = list(csv.DictReader(open(tmp_path / "d.csv")))
    assert len(rows) >= 10 and rows[0].keys() == {"feature", "bin_left", "bin_right", "benign",
                                                  "malicious"}


def test_convergence_curve():
    one = SelectionTrace(steps=[("a", 0.3)], metric="for_rate", higher_is_better=False)
    assert convergence_curve(one) == [(1, "a", 0.3, 0.3)]
    trace = SelectionTrace(steps=[("a", 0.3), ("b", 0.1), ("c", 0.2), ("d", 0.05)],
                           higher_is_better=False)
    best = [r[3] for r in convergence_curve(trace)]
    assert best == [0.3, 0.1, 0.1, 0.05]
    with pytest.raises(ValueError):
        convergence_curve(SelectionTrace())


def test_convergence_csv(tmp_path):
    trace = SelectionTrace(steps=[("a", 0.5), ("b", 0.7)], higher_is_better=True)
    write_convergence_csv(trace, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "step,feature,metric,best_so_far", "1,a,0.5,0.5", "2,b,0.7,0.7"]
