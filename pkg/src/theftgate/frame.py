"""Wide labeled feature table and its on-disk formats.

``frame.bin`` layout (all integers little-endian)::

    b"TGF1"
    u32 column count C, u64 row count R
    C x (u32 byte length, UTF-8 column name)
    u32 user count U, U x (u32 byte length, UTF-8 user id)
    u32[R]  per-row user index
    i64[R]  per-row timestamp (ms)
    i8[R]   label: -1 unlabeled, 0 benign, 1 malicious
    i8[R]   target class index, -1 for none
    f64[R*C] values, row-major; null cells hold 0.0
    u8[ceil(R*C/8)] null bitmap, one bit per cell, LSB first, 1 = null
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from theftgate.telemetry import SchemaError

TARGET_CLASSES = ("AudioRecord", "BrowserInfo", "Contacts", "GPS", "Photos", "URL")
BENIGN, MALICIOUS = 0, 1
UNLABELED = -1
NO_TARGET = -1
ACTIONS = {"benign": BENIGN, "malicious": MALICIOUS}
ACTION_NAMES = {BENIGN: "benign", MALICIOUS: "malicious", UNLABELED: ""}

FRAME_MAGIC = b"TGF1"


class FrameFormatError(ValueError):
    pass


class EmptyFrameError(ValueError):
    pass


@dataclass(eq=False)
class FeatureFrame:
    """Rectangular float table; ``NaN`` marks a null cell.

    ``label`` holds -1/0/1 and ``target`` holds an index into
    :data:`TARGET_CLASSES` or -1. A target is only ever set on malicious rows.
    """

    columns: list[str]
    values: np.ndarray
    users: np.ndarray
    t_ms: np.ndarray
    label: np.ndarray = field(default=None)  # type: ignore[assignment]
    target: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.columns = list(self.columns)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            self.values = self.values.reshape(-1, len(self.columns))
        n_rows = self.values.shape[0]
        self.users = np.asarray(self.users, dtype=object)
        self.t_ms = np.asarray(self.t_ms, dtype=np.int64)
        if self.label is None:
            self.label = np.full(n_rows, UNLABELED, dtype=np.int8)
        if self.target is None:
            self.target = np.full(n_rows, NO_TARGET, dtype=np.int8)
        self.label = np.asarray(self.label, dtype=np.int8)
        self.target = np.asarray(self.target, dtype=np.int8)
        if self.values.shape[1] != len(self.columns):
            raise SchemaError(
                f"{self.values.shape[1]} value columns but {len(self.columns)} names"
            )
        for name, arr in (("users", self.users), ("t_ms", self.t_ms),
                          ("label", self.label), ("target", self.target)):
            if arr.shape != (n_rows,):
                raise SchemaError(f"{name} has shape {arr.shape}, expected ({n_rows},)")
        if len(set(self.columns)) != len(self.columns):
            raise SchemaError("duplicate column names")
        if np.any((self.target != NO_TARGET) & (self.label != MALICIOUS)):
            raise SchemaError("target class set on a row that is not malicious")
        if np.any((self.target < NO_TARGET) | (self.target >= len(TARGET_CLASSES))):
            raise SchemaError("target class index out of range")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def null_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def is_labeled(self) -> bool:
        return bool(len(self)) and bool(np.all(self.label != UNLABELED))

    def column_index(self, names: Sequence[str]) -> list[int]:
        pos = {c: i for i, c in enumerate(self.columns)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise SchemaError(f"columns not in frame: {missing}")
        return [pos[n] for n in names]

    def select(self, names: Sequence[str]) -> "FeatureFrame":
        idx = self.column_index(names)
        return FeatureFrame(list(names), self.values[:, idx], self.users, self.t_ms,
                            self.label, self.target)

    def take(self, rows) -> "FeatureFrame":
        rows = np.asarray(rows)
        return FeatureFrame(self.columns, self.values[rows], self.users[rows],
                            self.t_ms[rows], self.label[rows], self.target[rows])

    def equals(self, other: "FeatureFrame") -> bool:
        """Bit-exact equality, null masks included."""
        if self.columns != other.columns or self.shape != other.shape:
            return False
        mask = self.null_mask
        if not np.array_equal(mask, other.null_mask):
            return False
        a = np.where(mask, 0.0, self.values).view(np.uint64)
        b = np.where(mask, 0.0, other.values).view(np.uint64)
        return (
            np.array_equal(a, b)
            and list(self.users) == list(other.users)
            and np.array_equal(self.t_ms, other.t_ms)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.target, other.target)
        )


def concat_frames(frames: Iterable[FeatureFrame]) -> FeatureFrame:
    frames = list(frames)
    if not frames:
        raise EmptyFrameError("nothing to concatenate")
    cols = frames[0].columns
    for f in frames[1:]:
        if f.columns != cols:
            raise SchemaError("frames have different columns")
    return FeatureFrame(
        cols,
        np.vstack([f.values for f in frames]),
        np.concatenate([f.users for f in frames]),
        np.concatenate([f.t_ms for f in frames]),
        np.concatenate([f.label for f in frames]),
        np.concatenate([f.target for f in frames]),
    )


# -- frame.bin ---------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def frame_to_bytes(frame: FeatureFrame) -> bytes:
    n_rows, n_cols = frame.shape
    user_names = sorted(set(frame.users.tolist()))
    user_pos = {u: i for i, u in enumerate(user_names)}
    mask = frame.null_mask
    buf = io.BytesIO()
    buf.write(FRAME_MAGIC)
    buf.write(struct.pack("<IQ", n_cols, n_rows))
    for c in frame.columns:
        buf.write(_pack_str(c))
    buf.write(struct.pack("<I", len(user_names)))
    for u in user_names:
        buf.write(_pack_str(u))
    buf.write(np.array([user_pos[u] for u in frame.users], dtype="<u4").tobytes())
    buf.write(frame.t_ms.astype("<i8").tobytes())
    buf.write(frame.label.astype("i1").tobytes())
    buf.write(frame.target.astype("i1").tobytes())
    buf.write(np.where(mask, 0.0, frame.values).astype("<f8").tobytes())
    buf.write(np.packbits(mask.ravel(), bitorder="little").tobytes())
    return buf.getvalue()


class BinaryReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FrameFormatError("truncated container")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def frame_from_bytes(data: bytes) -> FeatureFrame:
    r = BinaryReader(data)
    if r.take(4) != FRAME_MAGIC:
        raise FrameFormatError("not a frame container (bad magic)")
    n_cols, n_rows = r.unpack("<IQ")
    columns = [r.string() for _ in range(n_cols)]
    (n_users,) = r.unpack("<I")
    user_names = np.array([r.string() for _ in range(n_users)] or [""], dtype=object)
    user_idx = r.array("<u4", n_rows)
    t_ms = r.array("<i8", n_rows)
    label = r.array("i1", n_rows)
    target = r.array("i1", n_rows)
    values = r.array("<f8", n_rows * n_cols).astype(np.float64).reshape(n_rows, n_cols)
    n_cells = n_rows * n_cols
    bits = r.array("u1", (n_cells + 7) // 8)
    if r.pos != len(data):
        raise FrameFormatError("trailing bytes after null bitmap")
    mask = np.unpackbits(bits, count=n_cells, bitorder="little").astype(bool)
    values[mask.reshape(n_rows, n_cols)] = np.nan
    return FeatureFrame(columns, values, user_names[user_idx], t_ms, label, target)


def save_frame(frame: FeatureFrame, path) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def load_frame(path) -> FeatureFrame:
    return frame_from_bytes(Path(path).read_bytes())


# -- frame CSV ---------------------------------------------------------------

def format_value(v: float) -> str:
    return "" if v != v else repr(float(v))


def write_frame_csv(frame: FeatureFrame, path) -> None:
    """``user,t_ms,action,target,<columns...>``; empty field = null."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "t_ms", "action", "target", *frame.columns])
        for i in range(len(frame)):
            tgt = frame.target[i]
            w.writerow([
                frame.users[i],
                int(frame.t_ms[i]),
                ACTION_NAMES[int(frame.label[i])],
                TARGET_CLASSES[tgt] if tgt != NO_TARGET else "",
                *(format_value(v) for v in frame.values[i]),
            ])


def read_frame_csv(path) -> FeatureFrame:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or header[:4] != ["user", "t_ms", "action", "target"]:
            raise FrameFormatError(f"{path}: header must start with user,t_ms,action,target")
        columns = header[4:]
        users, ts, labels, targets, values = [], [], [], [], []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise FrameFormatError(f"{path}:{lineno}: expected {len(header)} fields")
            users.append(row[0])
            ts.append(int(row[1]))
            labels.append(ACTIONS.get(row[2], UNLABELED))
            targets.append(TARGET_CLASSES.index(row[3]) if row[3] else NO_TARGET)
            values.append([float(v) if v != "" else np.nan for v in row[4:]])
    return FeatureFrame(
        columns,
        np.array(values, dtype=np.float64).reshape(len(users), len(columns)),
        np.array(users, dtype=object),
        np.array(ts, dtype=np.int64),
        np.array(labels, dtype=np.int8),
        np.array(targets, dtype=np.int8),
    )


def target_index(name: Optional[str]) -> int:
    if not name:
        return NO_TARGET
    return TARGET_CLASSES.index(name)
