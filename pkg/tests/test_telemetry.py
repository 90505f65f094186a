import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from theftgate.telemetry import (
    AlignmentError,
    AppSnapshotBlock,
    GlobalSnapshot,
    SchemaError,
    UnknownAppError,
    build_schema,
    empty_local,
    merge,
    pivot,
    size_naive,
    size_pivoted,
)


def test_schema_columns_and_width():
    s = build_schema(["mem", "cpu"], ["rss"], ["A", "B"])
    assert s.columns == ["mem", "cpu", "rss_A", "rss_B"]
    assert s.width == 4


def test_empty_universe_has_global_width():
    s = build_schema(["mem", "cpu"], ["rss", "pss"], [])
    assert s.width == 2 and s.columns == ["mem", "cpu"]


def test_duplicate_names_rejected():
    with pytest.raises(SchemaError):
        build_schema(["a", "a"], ["x"], ["A"])
    with pytest.raises(SchemaError):
        build_schema(["x_A"], ["x"], ["A"])  # pivoted name collides with a global


def test_column_origin_survives_underscored_app_names():
    s = build_schema(["g"], ["rss", "pss"], ["my_app", "B"])
    assert s.column_origin(0) == (None, "g")
    assert s.column_origin(2) == ("my_app", "pss")
    assert s.column_origin(3) == ("B", "rss")


def test_pivot_places_values():
    s = build_schema(["g"], ["x", "y"], ["A", "B"])
    full = pivot(AppSnapshotBlock("u", 0, (("A", (1.0, 2.0)), ("B", (3.0, 4.0)))), s)
    assert full.values.tolist() == [1.0, 2.0, 3.0, 4.0]
    part = pivot(AppSnapshotBlock("u", 0, (("B", (3.0, 4.0)),)), s)
    assert np.isnan(part.values[:2]).all() and part.values[2:].tolist() == [3.0, 4.0]


def test_pivot_rejects_unknown_app_and_wrong_arity():
    s = build_schema(["g"], ["x"], ["A"])
    with pytest.raises(UnknownAppError):
        pivot(AppSnapshotBlock("u", 0, (("Z", (1.0,)),)), s)
    with pytest.raises(SchemaError):
        pivot(AppSnapshotBlock("u", 0, (("A", (1.0, 2.0)),)), s)


def test_duplicate_app_in_block_rejected():
    with pytest.raises(SchemaError):
        AppSnapshotBlock("u", 0, (("A", (1.0,)), ("A", (2.0,))))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_pivot_is_invariant_to_row_order(data):
    apps = data.draw(st.lists(st.text("abcdef", min_size=1, max_size=4), min_size=1,
                              max_size=6, unique=True))
    n = data.draw(st.integers(1, 4))
    s = build_schema(["g"], [f"f{i}" for i in range(n)], sorted(apps))
    present = data.draw(st.lists(st.sampled_from(apps), unique=True))
    values = st.one_of(st.none(), st.floats(-1e6, 1e6))
    rows = [(a, tuple(data.draw(st.lists(values, min_size=n, max_size=n)))) for a in present]
    shuffled = data.draw(st.permutations(rows))
    a = pivot(AppSnapshotBlock("u", 5, tuple(rows)), s).values
    b = pivot(AppSnapshotBlock("u", 5, tuple(shuffled)), s).values
    assert np.array_equal(a, b, equal_nan=True)


def test_merge_concatenates_and_checks_alignment():
    s = build_schema(["g1", "g2"], ["x", "y"], ["A", "B"])
    local = pivot(AppSnapshotBlock("u", 10, (("A", (1, 2)), ("B", (3, 4)))), s)
    row = merge(GlobalSnapshot("u", 10, (10.0, 20.0)), local)
    assert row.values.tolist() == [10, 20, 1, 2, 3, 4] and row.width == 6
    empty = merge(GlobalSnapshot("u", 10, (10.0, None)), empty_local("u", 10, s))
    assert np.isnan(empty.values[1]) and np.isnan(empty.values[2:]).all()
    with pytest.raises(AlignmentError):
        merge(GlobalSnapshot("u", 11, (1.0, 2.0)), local)
    with pytest.raises(AlignmentError):
        merge(GlobalSnapshot("v", 10, (1.0, 2.0)), local)


def test_negative_timestamp_rejected():
    with pytest.raises(ValueError):
        GlobalSnapshot("u", -1, ())


def test_sizes():
    assert size_pivoted(128, 56, 55) == 3208
    assert size_naive(128, 56, 55) == 10120
    assert size_pivoted(7, 3, 1) == size_naive(7, 3, 1) == 10
    assert (size_pivoted(1, 1, 100), size_naive(1, 1, 100)) == (101, 200)
    with pytest.raises(ValueError):
        size_pivoted(-1, 1, 1)


@given(st.integers(1, 500), st.integers(0, 100), st.integers(2, 200))
def test_pivot_is_strictly_smaller_with_several_apps(g, n, m):
    assert size_pivoted(g, n, m) < size_naive(g, n, m)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_sizes_equal_only_for_one_app_or_no_globals(g, n, m):
    equal = size_pivoted(g, n, m) == size_naive(g, n, m)
    assert equal == (m == 1 or g == 0)


def _unpivot(values, schema):
    """Test-only inverse: the present (app, values) rows of a local part."""
    rows = []
    for i, app in enumerate(schema.app_universe):
        cells = values[i * schema.n:(i + 1) * schema.n]
        if not np.all(np.isnan(cells)):
            rows.append((app, tuple(None if np.isnan(v) else float(v) for v in cells)))
    return tuple(rows)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_unpivot_inverts_pivot(data):
    apps = sorted(data.draw(st.lists(st.sampled_from("ABCDEFG"), min_size=1, unique=True)))
    n = data.draw(st.integers(1, 3))
    schema = build_schema(["g"], [f"f{i}" for i in range(n)], apps)
    present = data.draw(st.lists(st.sampled_from(apps), unique=True).map(sorted))
    rows = []
    for app in present:  # at least one non-null cell so presence is observable
        cells = data.draw(st.lists(st.one_of(st.none(), st.floats(-1e3, 1e3)), min_size=n,
                                   max_size=n).filter(lambda c: any(v is not None for v in c)))
        rows.append((app, tuple(cells)))
    local = pivot(AppSnapshotBlock("u", 0, tuple(rows)), schema)
    assert local.values.size == schema.m * schema.n
    assert _unpivot(local.values, schema) == tuple(rows)
