"""``model.bin`` container.

Layout (little-endian)::

    b"TGM1", u32 format version
    u32 header length, UTF-8 JSON header (kind, schema hash, feature names,
        hyperparameters, seed, sample size, per-tree node counts, importance)
    f64 threshold, u32 prior length, f64[...] prior,
    u32 class count, i64[...] classes
    per tree: i32 feature, f64 threshold, u8 missing_left, i32 left, i32 right,
              f64 value (nodes x outputs), f64 gain, i64 n_samples
    (kNN instead: f64 mean, f64 scale, f64 X (rows x features), i64 y)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from theftgate.frame import FrameFormatError, BinaryReader
from theftgate.learners._tree import Tree
from theftgate.learners.model import (
    KNN,
    HyperParams,
    KNNModel,
    Model,
    TreeEnsemble,
    importance,
    schema_hash,
)
from theftgate.telemetry import SchemaError

MODEL_MAGIC = b"TGM1"
FORMAT_VERSION = 1


def _arr(buf: io.BytesIO, a: np.ndarray, dtype: str) -> None:
    buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def model_to_bytes(model: Model) -> bytes:
    header = {
        "kind": model.kind,
        "schema_hash": schema_hash(model.feature_names),
        "feature_names": list(model.feature_names),
        "hyperparameters": model.hp.to_dict(),
    }
    body = io.BytesIO()
    classes = np.asarray(model.classes, dtype=np.int64)
    if isinstance(model, KNNModel):
        header.update(k=model.k, rows=int(model.X.shape[0]))
        body.write(struct.pack("<I", classes.size))
        _arr(body, classes, "<i8")
        for a in (model.mean, model.scale, model.X):
            _arr(body, a, "<f8")
        _arr(body, model.y, "<i8")
    else:
        header.update(
            seed=model.seed,
            sample_size=model.sample_size,
            outputs=[int(t.value.shape[1]) for t in model.trees],
            node_counts=[t.node_count for t in model.trees],
            importance=[[n, g] for n, g in importance(model)],
        )
        body.write(struct.pack("<d", model.threshold))
        body.write(struct.pack("<I", model.prior.size))
        _arr(body, model.prior, "<f8")
        body.write(struct.pack("<I", classes.size))
        _arr(body, classes, "<i8")
        for t in model.trees:
            _arr(body, t.feature, "<i4")
            _arr(body, t.threshold, "<f8")
            _arr(body, t.missing_left, "u1")
            _arr(body, t.left, "<i4")
            _arr(body, t.right, "<i4")
            _arr(body, t.value, "<f8")
            _arr(body, t.gain, "<f8")
            _arr(body, t.n_samples, "<i8")
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (MODEL_MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw_header)) + raw_header
            + body.getvalue())


def model_from_bytes(data: bytes, expected_columns: Optional[Sequence[str]] = None) -> Model:
    r = BinaryReader(data)
    if r.take(4) != MODEL_MAGIC:
        raise FrameFormatError("not a model container (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FrameFormatError(f"unsupported model format version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    names = header["feature_names"]
    if schema_hash(names) != header["schema_hash"]:
        raise SchemaError("model header is corrupt: schema hash does not match its feature names")
    if expected_columns is not None and schema_hash(list(expected_columns)) != header["schema_hash"]:
        raise SchemaError("model was trained on a different column schema")
    hp = HyperParams.from_dict(header["hyperparameters"])
    p = len(names)
    if header["kind"] == KNN:
        (nc,) = r.unpack("<I")
        classes = r.array("<i8", nc)
        rows = header["rows"]
        mean = r.array("<f8", p)
        scale = r.array("<f8", p)
        X = r.array("<f8", rows * p).reshape(rows, p)
        y = r.array("<i8", rows)
        model: Model = KNNModel(names, classes, header["k"], mean, scale, X, y, hp=hp)
    else:
        (threshold,) = r.unpack("<d")
        (np_,) = r.unpack("<I")
        prior = r.array("<f8", np_)
        (nc,) = r.unpack("<I")
        classes = r.array("<i8", nc)
        trees = []
        for nodes, outs in zip(header["node_counts"], header["outputs"]):
            trees.append(Tree(
                feature=r.array("<i4", nodes).astype(np.int32),
                threshold=r.array("<f8", nodes).astype(np.float64),
                missing_left=r.array("u1", nodes).astype(bool),
                left=r.array("<i4", nodes).astype(np.int32),
                right=r.array("<i4", nodes).astype(np.int32),
                value=r.array("<f8", nodes * outs).astype(np.float64).reshape(nodes, outs),
                gain=r.array("<f8", nodes).astype(np.float64),
                n_samples=r.array("<i8", nodes).astype(np.int64),
            ))
        model = TreeEnsemble(header["kind"], trees, classes, names, hp, seed=header["seed"],
                             prior=prior, sample_size=header["sample_size"], threshold=threshold)
    if r.pos != len(data):
        raise FrameFormatError("trailing bytes after model payload")
    return model


def save_model(model: Model, path: Union[str, Path]) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: Union[str, Path], expected_columns: Optional[Sequence[str]] = None) -> Model:
    return model_from_bytes(Path(path).read_bytes(), expected_columns)
