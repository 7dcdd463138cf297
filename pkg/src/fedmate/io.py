"""On-disk formats: model snapshots, metrics and ledger CSVs, run manifest.

Model snapshot layout (all little-endian)::

    b"FMAT"                 magic
    u32 version             currently 1
    u32 layer_count         extractor layers followed by the classifier
    per layer:
        u32 rows, u32 cols
        f64[rows*cols]      weights, row-major
        f64[rows]           biases
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .nn import ModelParams

MAGIC = b"FMAT"
VERSION = 1

METRICS_HEADER = [
    "round", "method", "mean_balanced_acc", "mean_matched_acc",
    "system_loss", "upload_params", "download_params",
]
LEDGER_HEADER = [
    "round", "participants",
    "up_extractor", "up_classifier", "up_prototypes", "up_model", "up_total",
    "down_extractor", "down_classifier", "down_prototypes", "down_model", "down_total",
    "train_loss_before", "train_loss_after",
]


def model_to_bytes(model: ModelParams) -> bytes:
    layers = list(model.extractor) + [model.classifier]
    parts = [MAGIC, struct.pack("<II", VERSION, len(layers))]
    for W, b in layers:
        rows, cols = W.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> ModelParams:
    if buf[:4] != MAGIC:
        raise ConfigurationError("not an FMAT snapshot")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ConfigurationError(f"unsupported FMAT version {version}")
    off = 12
    layers = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        W = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(buf, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        layers.append((W, b))
    if off != len(buf):
        raise ConfigurationError("trailing bytes in FMAT snapshot")
    return ModelParams(tuple(layers[:-1]), layers[-1])


def save_model(model: ModelParams, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path, config: dict, seed: int, version: str, extra=None) -> None:
    doc = {"version": version, "seed": seed, "config": config}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
