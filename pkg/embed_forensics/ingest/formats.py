"""
Reading and writing embedding files.

Three formats are supported:

jsonl
    one ``{"id": str, "label": str, "vector": [numbers]}`` record per line.
csv
    header ``id,label,v0,...,v{D-1}``.
packed_binary
    little-endian ``b"EMBX"``, u32 version, u32 N, u32 D, then N x D
    float32 row-major, with a sidecar ``<file>.json`` manifest holding
    ``{"ids": [...], "labels": [...]}``.

Text formats write 9 significant digits. packed_binary is the fidelity
format: values that are representable as float32 read back bit for bit.
"""

import json
import logging
import math
import re
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import (
    DimensionMismatchError,
    MalformedRecordError,
    NonFiniteError,
    ValidationError,
)
from .dataset import EmbeddingMatrix, record_label

logger = logging.getLogger(__name__)

FORMATS = ("jsonl", "csv", "packed_binary")

MAGIC = b"EMBX"
VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("n", "<u4"), ("d", "<u4")])
_FLOAT_FORMAT = "%.9g"


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def guess_format(path):
    """Pick a format from the file extension."""
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    if suffix in (".embx", ".bin"):
        return "packed_binary"
    raise ValidationError(f"cannot infer embedding format from {str(path)!r}")


def load_embeddings(path, format=None):
    """
    Load an embedding matrix.

    Parameters
    ----------
    path : str or Path
    format : {'jsonl', 'csv', 'packed_binary'}, optional
        Guessed from the extension when omitted.

    Returns
    -------
    EmbeddingMatrix
        Rows in file order.
    """
    format = format or guess_format(path)
    if format not in FORMATS:
        raise ValidationError(f"unknown embedding format {format!r}")
    m = {"jsonl": _load_jsonl, "csv": _load_csv, "packed_binary": _load_packed}[
        format
    ](Path(path))
    logger.info("loaded %s: N=%d D=%d", path, m.rows, m.dims)
    return m


def save_embeddings(m, path, format=None):
    """
    Write an embedding matrix.

    Will over write if exists.

    Parameters
    ----------
    m : EmbeddingMatrix
    path : str or Path
    format : {'jsonl', 'csv', 'packed_binary'}, optional
    """
    format = format or guess_format(path)
    if format not in FORMATS:
        raise ValidationError(f"unknown embedding format {format!r}")
    {"jsonl": _save_jsonl, "csv": _save_csv, "packed_binary": _save_packed}[format](
        m, Path(path)
    )
    logger.debug("wrote %s as %s", path, format)


def _labels_or_blank(m):
    return list(m.labels) if m.labels is not None else [""] * m.rows


def _finish(rows, ids, labels):
    if len(rows) == 0:
        raise ValidationError("embedding file holds no records")
    has_labels = any(label != "" for label in labels)
    return EmbeddingMatrix(
        np.array(rows, dtype=np.float64), ids, labels if has_labels else None
    )


def _load_jsonl(path):
    ids, labels, rows = [], [], []
    width = None
    with open(path, "r", encoding="utf-8") as fin:
        records = [line for line in fin if line.strip()]
    for j, line in enumerate(records):
        row = j + 1
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise MalformedRecordError(f"invalid JSON: {err.msg}", row=row) from err
        if not isinstance(rec, dict) or "id" not in rec or "vector" not in rec:
            raise MalformedRecordError("record needs 'id' and 'vector'", row=row)
        vector = rec["vector"]
        if not isinstance(vector, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in vector
        ):
            raise MalformedRecordError(
                "'vector' must be a list of numbers", row=row, sample_id=rec["id"]
            )
        if width is None:
            width = len(vector)
        elif len(vector) != width:
            raise DimensionMismatchError(
                f"expected {width} values, got {len(vector)}",
                row=row,
                sample_id=rec["id"],
            )
        if not all(math.isfinite(v) for v in vector):
            raise NonFiniteError("non-finite value", row=row, sample_id=rec["id"])
        ids.append(rec["id"])
        labels.append(record_label(rec))
        rows.append(vector)
    return _finish(rows, ids, labels)


def _save_jsonl(m, path):
    with open(path, "w", encoding="utf-8") as fout:
        for sample_id, label, vector in zip(m.sample_ids, _labels_or_blank(m), m.values):
            vector = [float(_FLOAT_FORMAT % v) for v in vector]
            rec = {"id": sample_id, "label": label, "vector": vector}
            fout.write(json.dumps(rec) + "\n")


def _load_csv(path):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as err:
        # pandas reports the 1-based file line; the header is line 1
        match = re.search(r"line (\d+)", str(err))
        row = int(match.group(1)) - 1 if match else None
        raise DimensionMismatchError("too many values", row=row) from err
    except pd.errors.EmptyDataError as err:
        raise ValidationError("embedding file holds no records") from err
    columns = list(df.columns)
    expected = ["id", "label"] + [f"v{i}" for i in range(len(columns) - 2)]
    if columns != expected:
        raise MalformedRecordError(f"csv header must be id,label,v0,...; got {columns}")
    vector_columns = columns[2:]
    blank = (df[vector_columns] == "").to_numpy()
    if blank.any():
        j = int(np.flatnonzero(blank.any(axis=1))[0])
        raise DimensionMismatchError(
            f"expected {len(vector_columns)} values, got {int((~blank[j]).sum())}",
            row=j + 1,
            sample_id=df["id"].iloc[j],
        )
    try:
        values = df[vector_columns].astype(np.float64).to_numpy()
    except ValueError as err:
        raise MalformedRecordError(f"non-numeric value: {err}") from err
    finite = np.isfinite(values).all(axis=1)
    if not finite.all():
        j = int(np.flatnonzero(~finite)[0])
        raise NonFiniteError("non-finite value", row=j + 1, sample_id=df["id"].iloc[j])
    return _finish(values, list(df["id"]), list(df["label"]))


def _save_csv(m, path):
    df = pd.DataFrame(m.values, columns=[f"v{i}" for i in range(m.dims)])
    df.insert(0, "label", _labels_or_blank(m))
    df.insert(0, "id", list(m.sample_ids))
    df.to_csv(path, index=False, float_format=_FLOAT_FORMAT)


def _load_packed(path):
    raw = path.read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise MalformedRecordError("packed file shorter than its header")
    header = np.frombuffer(raw, dtype=_HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise MalformedRecordError(f"bad magic bytes {header['magic']!r}")
    if header["version"] != VERSION:
        raise MalformedRecordError(f"unsupported version {int(header['version'])}")
    n, d = int(header["n"]), int(header["d"])
    payload = raw[_HEADER.itemsize :]
    if len(payload) != n * d * 4:
        raise DimensionMismatchError(
            f"payload holds {len(payload)} bytes, header promises {n}x{d} float32"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    with open(manifest_path(path), "r", encoding="utf-8") as fin:
        manifest = json.load(fin)
    ids = manifest.get("ids")
    labels = manifest.get("labels") or [""] * n
    if ids is None or len(ids) != n or len(labels) != n:
        raise DimensionMismatchError(f"manifest does not describe {n} rows")
    if not np.isfinite(values).all():
        j = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise NonFiniteError("non-finite value", row=j + 1, sample_id=ids[j])
    return _finish(values.astype(np.float64), ids, labels)


def _save_packed(m, path):
    header = np.array([(MAGIC, VERSION, m.rows, m.dims)], dtype=_HEADER)
    values = m.values.astype("<f4")
    if not np.array_equal(values.astype(np.float64), m.values):
        logger.debug("%s: values rounded to float32", path)
    with open(path, "wb") as fout:
        fout.write(header.tobytes())
        fout.write(values.tobytes(order="C"))
    with open(manifest_path(path), "w", encoding="utf-8") as fout:
        json.dump({"ids": list(m.sample_ids), "labels": _labels_or_blank(m)}, fout)
