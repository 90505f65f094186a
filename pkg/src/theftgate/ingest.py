"""Probe and label CSV readers, label alignment and the null-ratio filter.

File schemas (UTF-8, comma separated, empty field = null)::

    gsf.csv     user,t_ms,<global feature>...
    laf.csv     user,t_ms,app,<local feature>...
    labels.csv  user,start_ms,end_ms,action,target

Malformed rows are skipped and recorded in a :class:`MalformedLedger`
rather than aborting the run; a missing header column is a hard error.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from theftgate.frame import (
    ACTIONS,
    BENIGN,
    MALICIOUS,
    NO_TARGET,
    TARGET_CLASSES,
    EmptyFrameError,
    FeatureFrame,
)
from theftgate.telemetry import (
    AppSnapshotBlock,
    GlobalSnapshot,
    PivotedRow,
    PivotSchema,
    SchemaError,
    UnknownAppError,
    build_schema,
    empty_local,
    merge,
    pivot,
)

logger = logging.getLogger(__name__)

DEFAULT_SLACK_MS = 5000
DEFAULT_NULL_THRESHOLD = 0.7
GSF_KEYS = ("user", "t_ms")
LAF_KEYS = ("user", "t_ms", "app")
LABEL_HEADER = ("user", "start_ms", "end_ms", "action", "target")

PathLike = Union[str, Path]


@dataclass
class MalformedLedger:
    """Skipped-row counts per source, plus the first few reasons verbatim."""

    counts: dict = field(default_factory=lambda: defaultdict(int))
    samples: list = field(default_factory=list)
    max_samples: int = 50

    def record(self, source: str, line: int, reason: str) -> None:
        self.counts[source] += 1
        if len(self.samples) < self.max_samples:
            self.samples.append({"source": source, "line": line, "reason": reason})
        logger.warning("%s:%d skipped: %s", source, line, reason)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"counts": dict(sorted(self.counts.items())), "samples": list(self.samples)}


@dataclass(frozen=True)
class MoriartyLabel:
    user: str
    start_ms: int
    end_ms: int
    action: int  # BENIGN or MALICIOUS
    target: int = NO_TARGET  # index into TARGET_CLASSES

    def __post_init__(self) -> None:
        if self.start_ms > self.end_ms:
            raise ValueError(f"session starts after it ends ({self.start_ms} > {self.end_ms})")
        if self.action not in (BENIGN, MALICIOUS):
            raise ValueError(f"unknown action {self.action}")
        if (self.target != NO_TARGET) != (self.action == MALICIOUS):
            raise ValueError("a target is required for malicious sessions and forbidden otherwise")


class _Malformed(ValueError):
    pass


def _parse_number(s: str) -> float:
    if s == "":
        return math.nan
    try:
        v = float(s)
    except ValueError:
        raise _Malformed(f"unparsable number {s!r}") from None
    if not math.isfinite(v):
        raise _Malformed(f"non-finite number {s!r}")
    return v


def _parse_time(s: str) -> int:
    try:
        t = int(s)
    except ValueError:
        raise _Malformed(f"unparsable timestamp {s!r}") from None
    if t < 0:
        raise _Malformed(f"negative timestamp {t}")
    return t


def _header(path: PathLike, keys: Sequence[str], exact: bool = False):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        fh.close()
        raise SchemaError(f"{path}: empty file, expected header {','.join(keys)}")
    missing = [k for i, k in enumerate(keys) if i >= len(header) or header[i] != k]
    if missing or (exact and len(header) != len(keys)):
        fh.close()
        raise SchemaError(f"{path}: header must start with {','.join(keys)}; "
                          f"missing or misplaced: {missing or 'extra columns'}")
    names = header[len(keys):]
    seen: set[str] = set()
    for n in names:
        if n in seen or n == "":
            fh.close()
            raise SchemaError(f"{path}: duplicate or empty feature column {n!r}")
        seen.add(n)
    return names, reader, fh


class GsfStream:
    """Iterable of :class:`GlobalSnapshot`; ``names`` is the global feature list."""

    def __init__(self, path: PathLike, ledger: Optional[MalformedLedger] = None):
        self.path = Path(path)
        self.ledger = ledger if ledger is not None else MalformedLedger()
        self.names, reader, fh = _header(self.path, GSF_KEYS)
        fh.close()

    def __iter__(self) -> Iterator[GlobalSnapshot]:
        names, reader, fh = _header(self.path, GSF_KEYS)
        width = len(GSF_KEYS) + len(names)
        last: dict[str, int] = {}
        src = self.path.name
        with fh:
            for lineno, row in enumerate(reader, start=2):
                try:
                    if len(row) != width:
                        raise _Malformed(f"expected {width} fields, got {len(row)}")
                    user, t = row[0], _parse_time(row[1])
                    prev = last.get(user)
                    if prev is not None and t <= prev:
                        raise _Malformed(f"timestamp {t} not after previous probe {prev} for {user}")
                    values = tuple(_parse_number(v) for v in row[2:])
                except _Malformed as e:
                    self.ledger.record(src, lineno, str(e))
                    continue
                last[user] = t
                yield GlobalSnapshot(user, t, tuple(None if v != v else v for v in values))


class LafStream:
    """Iterable of :class:`AppSnapshotBlock`, grouping consecutive rows that
    share (user, t_ms). ``names`` is the local feature list."""

    def __init__(self, path: PathLike, ledger: Optional[MalformedLedger] = None):
        self.path = Path(path)
        self.ledger = ledger if ledger is not None else MalformedLedger()
        self.names, reader, fh = _header(self.path, LAF_KEYS)
        fh.close()

    def __iter__(self) -> Iterator[AppSnapshotBlock]:
        names, reader, fh = _header(self.path, LAF_KEYS)
        width = len(LAF_KEYS) + len(names)
        src = self.path.name
        key = None
        rows: list = []
        apps: set[str] = set()
        with fh:
            for lineno, row in enumerate(reader, start=2):
                try:
                    if len(row) != width:
                        raise _Malformed(f"expected {width} fields, got {len(row)}")
                    user, t, app = row[0], _parse_time(row[1]), row[2]
                    if app == "":
                        raise _Malformed("empty app name")
                    values = tuple(_parse_number(v) for v in row[3:])
                    if (user, t) == key and app in apps:
                        raise _Malformed(f"duplicate app {app!r} at t={t}")
                except _Malformed as e:
                    self.ledger.record(src, lineno, str(e))
                    continue
                if (user, t) != key:
                    if rows:
                        yield AppSnapshotBlock(key[0], key[1], tuple(rows))
                    key, rows, apps = (user, t), [], set()
                rows.append((app, tuple(None if v != v else v for v in values)))
                apps.add(app)
            if rows:
                yield AppSnapshotBlock(key[0], key[1], tuple(rows))


def read_gsf(path: PathLike, ledger: Optional[MalformedLedger] = None) -> GsfStream:
    return GsfStream(path, ledger)


def read_laf(path: PathLike, ledger: Optional[MalformedLedger] = None) -> LafStream:
    return LafStream(path, ledger)


def read_labels(path: PathLike, ledger: Optional[MalformedLedger] = None) -> list[MoriartyLabel]:
    ledger = ledger if ledger is not None else MalformedLedger()
    _, reader, fh = _header(path, LABEL_HEADER, exact=True)
    src = Path(path).name
    out = []
    with fh:
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(LABEL_HEADER):
                    raise _Malformed(f"expected {len(LABEL_HEADER)} fields, got {len(row)}")
                user, start, end = row[0], _parse_time(row[1]), _parse_time(row[2])
                if row[3] not in ACTIONS:
                    raise _Malformed(f"unknown action {row[3]!r}")
                if row[4] and row[4] not in TARGET_CLASSES:
                    raise _Malformed(f"unknown target {row[4]!r}")
                target = TARGET_CLASSES.index(row[4]) if row[4] else NO_TARGET
                try:
                    out.append(MoriartyLabel(user, start, end, ACTIONS[row[3]], target))
                except ValueError as e:
                    raise _Malformed(str(e)) from None
            except _Malformed as e:
                ledger.record(src, lineno, str(e))
    return out


def _assign_malicious(t: np.ndarray, sessions: Sequence[MoriartyLabel], slack_ms: int,
                      label: np.ndarray, target: np.ndarray) -> None:
    """Label rows (sorted ``t``) covered by a malicious session widened by
    ``slack_ms``; where sessions overlap the nearest start wins, ties to the
    earlier start."""
    best = np.full(t.size, np.iinfo(np.int64).max)
    for s in sorted(sessions, key=lambda s: (s.start_ms, s.end_ms)):
        lo = np.searchsorted(t, s.start_ms - slack_ms, side="left")
        hi = np.searchsorted(t, s.end_ms + slack_ms, side="right")
        if lo >= hi:
            continue
        dist = np.abs(t[lo:hi] - s.start_ms)
        better = dist < best[lo:hi]
        idx = np.arange(lo, hi)[better]
        best[idx] = dist[better]
        label[idx] = MALICIOUS
        target[idx] = s.target


def join_labels(rows: Iterable[PivotedRow], labels: Sequence[MoriartyLabel],
                columns: Sequence[str], slack_ms: int = DEFAULT_SLACK_MS) -> FeatureFrame:
    """Assemble a labeled frame. A row is malicious when its timestamp lies in
    ``[start - slack, end + slack]`` of a malicious session of the same user;
    every other row, inside a benign session or not, is benign."""
    if slack_ms < 0:
        raise ValueError("slack must be non-negative")
    users, ts, values = [], [], []
    for r in rows:
        users.append(r.user)
        ts.append(r.t_ms)
        values.append(r.values)
    n = len(users)
    t_arr = np.array(ts, dtype=np.int64)
    user_arr = np.array(users, dtype=object)
    X = np.vstack(values) if values else np.zeros((0, len(columns)))
    label = np.full(n, BENIGN, dtype=np.int8)
    target = np.full(n, NO_TARGET, dtype=np.int8)
    by_user: dict[str, list[MoriartyLabel]] = defaultdict(list)
    for lab in labels:
        if lab.action == MALICIOUS:
            by_user[lab.user].append(lab)
    for user, sessions in by_user.items():
        idx = np.flatnonzero(user_arr == user)
        if not idx.size:
            continue
        order = idx[np.argsort(t_arr[idx], kind="stable")]
        lab_u = label[order]
        tgt_u = target[order]
        _assign_malicious(t_arr[order], sessions, slack_ms, lab_u, tgt_u)
        label[order] = lab_u
        target[order] = tgt_u
    return FeatureFrame(list(columns), X, user_arr, t_arr, label, target)


@dataclass(frozen=True)
class NullFilterReport:
    threshold: float
    dropped: tuple  # (column, null fraction) in frame order
    kept: int

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "kept": self.kept,
            "dropped": [{"column": c, "null_fraction": f} for c, f in self.dropped],
        }


def null_fractions(frame: FeatureFrame) -> np.ndarray:
    if len(frame) == 0:
        return np.zeros(len(frame.columns))
    return frame.null_mask.sum(0) / len(frame)


def null_filter(frame: FeatureFrame, max_null_fraction: float = DEFAULT_NULL_THRESHOLD
                ) -> tuple[FeatureFrame, NullFilterReport]:
    """Drop every column whose null fraction is strictly above the threshold."""
    if not 0.0 <= max_null_fraction <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {max_null_fraction}")
    frac = null_fractions(frame)
    drop = frac > max_null_fraction
    if drop.all() and frame.columns:
        raise EmptyFrameError(
            f"every column has more than {max_null_fraction:g} nulls; nothing left")
    kept = [c for c, d in zip(frame.columns, drop) if not d]
    report = NullFilterReport(
        float(max_null_fraction),
        tuple((c, float(f)) for c, f, d in zip(frame.columns, frac, drop) if d),
        len(kept),
    )
    return frame.select(kept), report


@dataclass
class IngestResult:
    frame: FeatureFrame
    schema: PivotSchema
    null_report: NullFilterReport
    ledger: MalformedLedger
    orphan_blocks: int = 0

    def to_dict(self) -> dict:
        return {
            "rows": len(self.frame),
            "pivoted_width": self.schema.width,
            "columns_kept": len(self.frame.columns),
            "global_features": self.schema.g,
            "local_features": self.schema.n,
            "apps": self.schema.m,
            "malicious_rows": int(np.sum(self.frame.label == MALICIOUS)),
            "orphan_app_blocks": self.orphan_blocks,
            "null_filter": self.null_report.to_dict(),
            "malformed": self.ledger.to_dict(),
        }


def ingest(gsf_path: PathLike, laf_path: PathLike, labels_path: PathLike,
           slack_ms: int = DEFAULT_SLACK_MS,
           null_threshold: float = DEFAULT_NULL_THRESHOLD,
           app_universe: Optional[Sequence[str]] = None) -> IngestResult:
    """Pivot-merge probes, join labels and apply the null filter.

    Two passes over the app file: the first fixes the app universe (all apps
    ever seen, sorted) unless one is given, the second pivots. With a fixed
    universe, rows for other apps are skipped as malformed. Global snapshots
    drive the output rows; app blocks with no global snapshot are dropped and
    counted.
    """
    ledger = MalformedLedger()
    gsf = read_gsf(gsf_path, ledger)
    laf = read_laf(laf_path, ledger)
    labels = read_labels(labels_path, ledger)

    blocks: dict[tuple[str, int], AppSnapshotBlock] = {}
    seen_apps: set[str] = set()
    for block in laf:
        key = (block.user, block.t_ms)
        if key in blocks:
            ledger.record(laf.path.name, 0, f"app rows for {key} are not contiguous")
            continue
        blocks[key] = block
        seen_apps.update(app for app, _ in block.rows)
    universe = sorted(seen_apps) if app_universe is None else list(app_universe)
    schema = build_schema(gsf.names, laf.names, universe)
    universe_set = set(universe)

    def rows() -> Iterator[PivotedRow]:
        for snap in gsf:
            block = blocks.pop((snap.user, snap.t_ms), None)
            if block is None:
                local = empty_local(snap.user, snap.t_ms, schema)
            else:
                try:
                    local = pivot(block, schema)
                except UnknownAppError:
                    known = tuple(r for r in block.rows if r[0] in universe_set)
                    for app, _ in block.rows:
                        if app not in universe_set:
                            ledger.record(laf.path.name, 0, f"app {app!r} outside the fixed universe")
                    local = pivot(AppSnapshotBlock(block.user, block.t_ms, known), schema)
            yield merge(snap, local)

    frame = join_labels(rows(), labels, schema.columns, slack_ms)
    orphans = len(blocks)
    if orphans:
        logger.warning("%d app blocks had no matching global snapshot", orphans)
    filtered, report = null_filter(frame, null_threshold)
    return IngestResult(filtered, schema, report, ledger, orphans)
