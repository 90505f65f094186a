"""Probe snapshot types and the pivot-merge transform.

A T4-style probe yields, per timestamp, one vector of global system
features (GSF) and one block of per-app local features (LAF). Pivoting
the block into a single row of ``m * n`` cells and concatenating it with
the global vector gives one wide row of ``g + m * n`` cells per timestamp,
instead of ``m`` rows of ``g + n`` cells that a relational join produces.

Nulls are kept as ``None`` in snapshots and as ``NaN`` in pivoted arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

OptFloat = Optional[float]


class SchemaError(ValueError):
    """Column names or layouts that do not line up."""


class AlignmentError(ValueError):
    """Global and local halves of a row come from different probes."""


class UnknownAppError(KeyError):
    """An app name outside the fixed app universe."""

    def __init__(self, app: str):
        super().__init__(app)
        self.app = app

    def __str__(self) -> str:
        return f"app {self.app!r} is not in the schema app universe"


def _check_timestamp(t_ms: int) -> None:
    if t_ms < 0:
        raise ValueError(f"timestamp must be non-negative, got {t_ms}")


@dataclass(frozen=True)
class GlobalSnapshot:
    user: str
    t_ms: int
    values: tuple[OptFloat, ...]

    def __post_init__(self) -> None:
        _check_timestamp(self.t_ms)


@dataclass(frozen=True)
class AppSnapshotBlock:
    """All per-app rows sampled for one user at one timestamp."""

    user: str
    t_ms: int
    rows: tuple[tuple[str, tuple[OptFloat, ...]], ...]

    def __post_init__(self) -> None:
        _check_timestamp(self.t_ms)
        names = [app for app, _ in self.rows]
        if len(set(names)) != len(names):
            seen: set[str] = set()
            dup = next(a for a in names if a in seen or seen.add(a))
            raise SchemaError(f"duplicate app {dup!r} in block at t={self.t_ms}")


@dataclass(frozen=True)
class PivotSchema:
    global_names: tuple[str, ...]
    local_names: tuple[str, ...]
    app_universe: tuple[str, ...]
    _app_pos: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_app_pos", {a: i for i, a in enumerate(self.app_universe)})

    @property
    def g(self) -> int:
        return len(self.global_names)

    @property
    def n(self) -> int:
        return len(self.local_names)

    @property
    def m(self) -> int:
        return len(self.app_universe)

    @property
    def width(self) -> int:
        return self.g + self.m * self.n

    @property
    def local_columns(self) -> list[str]:
        return [f"{f}_{a}" for a in self.app_universe for f in self.local_names]

    @property
    def columns(self) -> list[str]:
        return list(self.global_names) + self.local_columns

    def app_index(self, app: str) -> int:
        try:
            return self._app_pos[app]
        except KeyError:
            raise UnknownAppError(app) from None

    def column_origin(self, index: int) -> tuple[Optional[str], str]:
        """(app, feature) for a column index; app is None for globals.

        Recorded from the layout, so app names with underscores are fine.
        """
        if index < self.g:
            return None, self.global_names[index]
        app_i, feat_i = divmod(index - self.g, self.n)
        return self.app_universe[app_i], self.local_names[feat_i]


def _first_duplicate(names: Sequence[str]) -> Optional[str]:
    seen: set[str] = set()
    for name in names:
        if name in seen:
            return name
        seen.add(name)
    return None


def build_schema(
    global_names: Sequence[str],
    local_names: Sequence[str],
    app_universe: Sequence[str],
) -> PivotSchema:
    """Fix the column layout: globals, then every local feature per app."""
    for kind, names in (("global", global_names), ("local", local_names), ("app", app_universe)):
        dup = _first_duplicate(names)
        if dup is not None:
            raise SchemaError(f"duplicate {kind} name {dup!r}")
    schema = PivotSchema(tuple(global_names), tuple(local_names), tuple(app_universe))
    dup = _first_duplicate(schema.columns)
    if dup is not None:
        raise SchemaError(f"duplicate pivoted column name {dup!r}")
    return schema


@dataclass(frozen=True)
class LocalPart:
    user: str
    t_ms: int
    values: np.ndarray


@dataclass(frozen=True)
class PivotedRow:
    user: str
    t_ms: int
    global_values: np.ndarray
    local_values: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.global_values, self.local_values])

    @property
    def width(self) -> int:
        return self.global_values.size + self.local_values.size


def _to_array(values: Sequence[OptFloat]) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


def pivot(block: AppSnapshotBlock, schema: PivotSchema) -> LocalPart:
    out = np.full(schema.m * schema.n, np.nan)
    n = schema.n
    for app, values in block.rows:
        if len(values) != n:
            raise SchemaError(f"app {app!r} has {len(values)} local values, schema expects {n}")
        start = schema.app_index(app) * n
        out[start : start + n] = _to_array(values)
    return LocalPart(block.user, block.t_ms, out)


def empty_local(user: str, t_ms: int, schema: PivotSchema) -> LocalPart:
    """Local part for a timestamp with no app rows at all."""
    return LocalPart(user, t_ms, np.full(schema.m * schema.n, np.nan))


def merge(gsf: GlobalSnapshot, local: LocalPart) -> PivotedRow:
    if gsf.user != local.user or gsf.t_ms != local.t_ms:
        raise AlignmentError(
            f"global ({gsf.user}, {gsf.t_ms}) does not match local ({local.user}, {local.t_ms})"
        )
    return PivotedRow(gsf.user, gsf.t_ms, _to_array(gsf.values), local.values)


def size_pivoted(g: int, n: int, m: int) -> int:
    """Cells per timestamp after pivot-merge: one row of g + m*n."""
    _check_sizes(g, n, m)
    return g + m * n


def size_naive(g: int, n: int, m: int) -> int:
    """Cells per timestamp for a plain join: m rows of g + n."""
    _check_sizes(g, n, m)
    return m * (g + n)


def _check_sizes(*counts: int) -> None:
    if any(c < 0 for c in counts):
        raise ValueError(f"sizes must be non-negative, got {counts}")
