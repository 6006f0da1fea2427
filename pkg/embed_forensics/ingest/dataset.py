"""Containers for the observed samples and their latent vectors."""

import json
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from ..errors import (
    DimensionMismatchError,
    DuplicateIdError,
    MalformedRecordError,
    NonFiniteError,
    ValidationError,
)

Sample = namedtuple("Sample", ["id", "label", "text"])


def record_label(rec):
    """Label of a json record; a missing or null label is the empty string."""
    label = rec.get("label")
    return "" if label is None else str(label)


def _check_ids(ids):
    seen = set()
    for j, sample_id in enumerate(ids):
        if not isinstance(sample_id, str) or not sample_id:
            raise MalformedRecordError("sample id must be a non-empty string", row=j + 1)
        if sample_id in seen:
            raise DuplicateIdError("duplicate sample id", row=j + 1, sample_id=sample_id)
        seen.add(sample_id)


@dataclass(frozen=True)
class LabeledDataset:
    """
    The observed data: ordered samples with their (hidden) metadata label.

    ``class_names`` defaults to the labels in order of first appearance.
    """

    samples: tuple
    class_names: tuple = None

    def __post_init__(self):
        # (id, label) pairs are accepted as samples without text
        samples = tuple(Sample(*s) if len(s) == 3 else Sample(*s, None) for s in self.samples)
        object.__setattr__(self, "samples", samples)
        _check_ids([s.id for s in samples])
        labels = [s.label for s in samples]
        if self.class_names is None:
            object.__setattr__(self, "class_names", tuple(dict.fromkeys(labels)))
        else:
            names = tuple(self.class_names)
            if len(set(names)) != len(names):
                raise ValidationError("class_names must be unique")
            object.__setattr__(self, "class_names", names)
        known = set(self.class_names)
        for j, s in enumerate(samples):
            if s.label not in known:
                raise ValidationError(
                    f"label {s.label!r} not in class_names", row=j + 1, sample_id=s.id
                )

    @classmethod
    def from_columns(cls, ids, labels, texts=None, class_names=None):
        if texts is None:
            texts = [None] * len(ids)
        if not (len(ids) == len(labels) == len(texts)):
            raise ValidationError("ids, labels and texts must have the same length")
        return cls(tuple(zip(ids, labels, texts)), class_names)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    @property
    def labels(self):
        return [s.label for s in self.samples]

    @property
    def texts(self):
        """Raw texts, with missing texts as empty strings."""
        return [s.text or "" for s in self.samples]

    def label_codes(self):
        """Integer class index of every sample, following ``class_names``."""
        lookup = {name: i for i, name in enumerate(self.class_names)}
        return np.array([lookup[s.label] for s in self.samples], dtype=int)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """
    The latent data: an N x D matrix with one row per sample.

    The values array is stored as read-only float64 so a matrix can be
    shared between threads.
    """

    values: np.ndarray
    sample_ids: tuple
    labels: tuple = field(default=None)

    def __post_init__(self):
        raw = self.values
        if isinstance(raw, np.ndarray):
            values = np.array(raw, dtype=np.float64)
        else:
            rows = list(raw)
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                first = len(rows[0])
                bad = next(j for j, r in enumerate(rows) if len(r) != first)
                raise DimensionMismatchError(
                    f"expected {first} values, got {len(rows[bad])}", row=bad + 1
                )
            values = np.array(rows, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionMismatchError(f"expected a 2-D matrix, got shape {values.shape}")
        ids = tuple(self.sample_ids)
        if len(ids) != values.shape[0]:
            raise DimensionMismatchError(
                f"{len(ids)} sample ids for {values.shape[0]} rows"
            )
        _check_ids(ids)
        finite = np.isfinite(values).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise NonFiniteError("non-finite value", row=bad + 1, sample_id=ids[bad])
        labels = self.labels
        if labels is not None:
            labels = tuple(labels)
            if len(labels) != len(ids):
                raise DimensionMismatchError(f"{len(labels)} labels for {len(ids)} rows")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "labels", labels)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        labels = None if self.labels is None else [self.labels[i] for i in indices]
        return EmbeddingMatrix(
            self.values[indices], [self.sample_ids[i] for i in indices], labels
        )

    def with_values(self, values):
        """Same samples, new latent vectors (any width)."""
        return EmbeddingMatrix(values, self.sample_ids, self.labels)

    def stack(self, other):
        """Rows of ``self`` followed by the rows of ``other``."""
        if other.dims != self.dims:
            raise DimensionMismatchError(
                f"cannot stack D={other.dims} under D={self.dims}"
            )
        labels = None
        if self.labels is not None and other.labels is not None:
            labels = self.labels + other.labels
        return EmbeddingMatrix(
            np.vstack([self.values, other.values]),
            self.sample_ids + other.sample_ids,
            labels,
        )


def dataset_from_matrix(m, texts=None):
    """Build the LabeledDataset described by the labels stored with ``m``."""
    if m.labels is None:
        raise ValidationError("embedding file carries no labels")
    return LabeledDataset.from_columns(m.sample_ids, m.labels, texts)


def join(d, m):
    """
    Align an embedding matrix to a dataset.

    Returns
    -------
    EmbeddingMatrix
        Rows reordered to ``d`` order, labelled with the dataset labels.
    """
    position = {sample_id: j for j, sample_id in enumerate(m.sample_ids)}
    missing = [sample_id for sample_id in d.ids if sample_id not in position]
    if missing:
        raise ValidationError(
            f"{len(missing)} dataset ids have no embedding", sample_id=missing[0]
        )
    if len(position) != len(d):
        extra = sorted(set(position) - set(d.ids))
        raise ValidationError(
            f"{len(extra)} embeddings have no dataset entry", sample_id=extra[0]
        )
    order = [position[sample_id] for sample_id in d.ids]
    return EmbeddingMatrix(m.values[order], d.ids, d.labels)


def restrict_labels(d, m, labels):
    """
    Keep only the samples whose label is one of ``labels``.

    Parameters
    ----------
    d : LabeledDataset
    m : EmbeddingMatrix
        Aligned to ``d`` (see :func:`join`).
    labels : Iterable[str]

    Returns
    -------
    d, m
        The restricted dataset and matrix, still aligned. ``class_names``
        of the new dataset are the kept labels in order of first appearance.
    """
    keep = set(labels)
    unknown = sorted(keep - set(d.class_names))
    if unknown:
        raise ValidationError(f"unknown label(s) {unknown}; known: {list(d.class_names)}")
    if d.ids != list(m.sample_ids):
        raise ValidationError("dataset and embeddings are not aligned")
    index = [j for j, label in enumerate(d.labels) if label in keep]
    return LabeledDataset(tuple(d.samples[j] for j in index)), m.subset(index)


def load_dataset(fname):
    """
    Load a LabeledDataset from a jsonl file.

    Each line is ``{"id": str, "label": str, "text": str (optional)}``.

    Parameters
    ----------
    fname : str or Path

    Returns
    -------
    LabeledDataset
    """
    ids, labels, texts = [], [], []
    with open(fname, "r", encoding="utf-8") as fin:
        records = [line for line in fin if line.strip()]
    for j, line in enumerate(records):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise MalformedRecordError(f"invalid JSON: {err.msg}", row=j + 1) from err
        if not isinstance(rec, dict) or "id" not in rec:
            raise MalformedRecordError("record needs an 'id'", row=j + 1)
        text = rec.get("text")
        if text is not None and not isinstance(text, str):
            raise MalformedRecordError("'text' must be a string", row=j + 1)
        ids.append(rec["id"])
        labels.append(record_label(rec))
        texts.append(text)
    return LabeledDataset.from_columns(ids, labels, texts)


def save_dataset(d, fname):
    """
    Write a LabeledDataset as jsonl.

    Will over write if exists.
    """
    with open(fname, "w", encoding="utf-8") as fout:
        for s in d.samples:
            rec = {"id": s.id, "label": s.label}
            if s.text is not None:
                rec["text"] = s.text
            fout.write(json.dumps(rec) + "\n")
