"""
Multi-class linear discriminant analysis.

The within-class scatter is whitened with an SVD (small singular values are
truncated, so D >> N works), then the whitened class means are diagonalized
to give the discriminant axes LD1, LD2, ...
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import train_test_split

from .errors import DegenerateInputError, DimensionMismatchError, ValidationError
from .ingest import EmbeddingMatrix, LabeledDataset
from .stats_core import as_array

logger = logging.getLogger(__name__)

# singular values below this fraction of the largest are dropped
RANK_TOLERANCE = 1e-10
# relative slack for calling two discriminant scores a tie
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValidationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not 0 <= self.seed < 2**32:
            raise ValidationError(f"seed must be an unsigned 32 bit integer, got {self.seed}")


def _labels_of(d):
    if isinstance(d, LabeledDataset):
        return list(d.labels)
    if isinstance(d, EmbeddingMatrix):
        if d.labels is None:
            raise ValidationError("embedding matrix carries no labels")
        return list(d.labels)
    return list(d)


def split(d, m, s):
    """
    Partition samples into train and test sets.

    Parameters
    ----------
    d : LabeledDataset or sequence of labels
        Must be aligned row-for-row with ``m``.
    m : EmbeddingMatrix
    s : SplitSpec

    Returns
    -------
    (train_matrix, train_labels), (test_matrix, test_labels)
        Both sides keep the original sample order.
    """
    labels = _labels_of(d)
    if len(labels) != m.rows:
        raise DimensionMismatchError(f"{len(labels)} labels for {m.rows} rows")
    if isinstance(d, LabeledDataset) and tuple(d.ids) != m.sample_ids:
        raise ValidationError("dataset and embeddings are not aligned; join them first")
    stratify = None
    if s.stratified:
        names, counts = np.unique(labels, return_counts=True)
        small = names[counts < 2]
        if small.size:
            raise ValidationError(
                f"class {str(small[0])!r} has fewer than 2 samples, cannot stratify"
            )
        stratify = labels
    train_idx, test_idx = train_test_split(
        np.arange(m.rows),
        train_size=s.train_fraction,
        random_state=s.seed,
        shuffle=True,
        stratify=stratify,
    )
    train_idx = np.sort(train_idx)
    test_idx = np.sort(test_idx)
    logger.debug("split %d rows into %d train / %d test", m.rows, train_idx.size, test_idx.size)
    return (
        (m.subset(train_idx), [labels[i] for i in train_idx]),
        (m.subset(test_idx), [labels[i] for i in test_idx]),
    )


class _Whitener:
    """
    x -> x W with W W^T the (pseudo-)inverse of the within-class covariance.

    Without shrinkage W = V_r diag(1 / sigma_r) spans the retained subspace.
    With shrinkage the covariance is full rank and W is its symmetric inverse
    square root, applied without forming a D x D matrix.
    """

    def __init__(self, within, shrinkage, dof):
        dims = within.shape[1]
        _, s, vt = np.linalg.svd(within, full_matrices=False)
        sigma2 = s**2 / max(dof, 1)
        self.shrinkage = shrinkage
        if shrinkage:
            mu = sigma2.sum() / dims
            if mu == 0:
                raise DegenerateInputError("within-class scatter is zero; shrinkage is undefined")
            self.v = vt.T
            self.a = 1.0 / np.sqrt((1.0 - shrinkage) * sigma2 + shrinkage * mu)
            self.b = 1.0 / np.sqrt(shrinkage * mu)
            self.rank = dims
        elif s.size == 0 or s[0] == 0:
            logger.warning("within-class scatter is zero; using the identity metric")
            self.v = None
            self.rank = dims
        else:
            keep = s > RANK_TOLERANCE * s[0]
            self.v = vt[keep].T
            self.a = 1.0 / np.sqrt(sigma2[keep])
            self.rank = int(keep.sum())

    def apply(self, A):
        if self.v is None:
            return A
        proj = A @ self.v
        if self.shrinkage:
            return (proj * self.a) @ self.v.T + self.b * (A - proj @ self.v.T)
        return proj * self.a

    def axes(self, u):
        """Map whitened directions (columns of ``u``) back to data space."""
        if self.v is None:
            return u
        if self.shrinkage:
            coords = self.v.T @ u
            return self.v @ (self.a[:, None] * coords) + self.b * (u - self.v @ coords)
        return self.v @ (self.a[:, None] * u)


@dataclass(frozen=True)
class LdaModel:
    """
    A fitted discriminant.

    ``discriminant_axes`` rows are LD1..LDq (q <= C - 1) in data space, scaled
    so the pooled within-class variance along each is 1. Class 0's mean
    projects negative on every axis.
    """

    class_names: tuple
    class_means: np.ndarray
    discriminant_axes: np.ndarray
    projection_scalings: np.ndarray
    priors: np.ndarray
    shrinkage_used: bool
    shrinkage: float
    mean: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    within_rank: int

    @property
    def n_axes(self):
        return self.discriminant_axes.shape[0]

    @property
    def n_features(self):
        return self.mean.shape[0]

    def metadata(self):
        return {
            "class_names": list(self.class_names),
            "priors": [float(p) for p in self.priors],
            "n_axes": self.n_axes,
            "within_rank": self.within_rank,
            "rank_tolerance": RANK_TOLERANCE,
            "shrinkage_used": self.shrinkage_used,
            "shrinkage": self.shrinkage,
        }


def _encode(labels, class_names):
    lookup = {name: i for i, name in enumerate(class_names)}
    try:
        return np.array([lookup[label] for label in labels], dtype=int)
    except KeyError as err:
        raise ValidationError(f"unknown label {err.args[0]!r}") from None


def fit_lda(train, labels=None, shrinkage=None, class_names=None, priors=None):
    """
    Fit LDA on the training rows.

    Parameters
    ----------
    train : EmbeddingMatrix or array
        Shape (N, D).
    labels : sequence, optional
        One label per row; taken from ``train`` when omitted.
    shrinkage : float, optional
        Blend the within-class covariance towards a scaled identity,
        (1 - l) S_W + l tr(S_W) / D I, with l in [0, 1].
    class_names : sequence, optional
        Class order; defaults to the sorted distinct labels.
    priors : sequence, optional
        Defaults to the empirical class frequencies.

    Returns
    -------
    LdaModel
    """
    X = as_array(train)
    if labels is None:
        if not isinstance(train, EmbeddingMatrix):
            raise ValidationError("labels are required for a bare array")
        labels = _labels_of(train)
    labels = list(labels)
    n, dims = X.shape
    if len(labels) != n:
        raise DimensionMismatchError(f"{len(labels)} labels for {n} rows")
    if class_names is None:
        class_names = sorted(set(labels))
    class_names = tuple(class_names)
    y = _encode(labels, class_names)
    n_classes = len(class_names)
    if n_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {n_classes}")
    counts = np.bincount(y, minlength=n_classes)
    if counts.min() < 2:
        bad = class_names[int(np.argmin(counts))]
        raise ValidationError(f"class {bad!r} has fewer than 2 training samples")
    if shrinkage is not None and not 0 <= shrinkage <= 1:
        raise ValidationError(f"shrinkage must be in [0, 1], got {shrinkage}")

    if priors is None:
        priors = counts / n
    else:
        priors = np.asarray(priors, dtype=np.float64)
        if priors.shape != (n_classes,) or (priors < 0).any():
            raise ValidationError("priors must be one non-negative value per class")
        priors = priors / priors.sum()

    means = np.zeros((n_classes, dims))
    np.add.at(means, y, X)
    means /= counts[:, None]
    xbar = priors @ means
    if not np.any(X - X[0]):
        raise DegenerateInputError("all training points are identical")

    whitener = _Whitener(X - means[y], shrinkage or 0.0, n - n_classes)
    between = np.sqrt(priors)[:, None] * whitener.apply(means - xbar)
    _, s2, vt2 = np.linalg.svd(between, full_matrices=False)
    if s2.size == 0 or s2[0] == 0:
        raise DegenerateInputError("class means coincide; no discriminant direction")
    q = min(int(np.sum(s2 > RANK_TOLERANCE * s2[0])), n_classes - 1)
    axes = whitener.axes(vt2[:q].T).T

    # orient so class 0 projects negative
    side = (means[0] - xbar) @ axes.T
    axes = np.where(side[:, None] > 0, -axes, axes)

    mean_scores = (means - xbar) @ axes.T
    coef = mean_scores @ axes
    with np.errstate(divide="ignore"):
        log_priors = np.log(priors)
    intercept = -0.5 * np.sum(mean_scores**2, axis=1) + log_priors - coef @ xbar

    model = LdaModel(
        class_names=class_names,
        class_means=means,
        discriminant_axes=axes,
        projection_scalings=s2[:q],
        priors=priors,
        shrinkage_used=bool(shrinkage),
        shrinkage=float(shrinkage or 0.0),
        mean=xbar,
        coef=coef,
        intercept=intercept,
        within_rank=whitener.rank,
    )
    logger.info(
        "fitted LDA: N=%d D=%d C=%d, within rank %d, %d axes",
        n,
        dims,
        n_classes,
        whitener.rank,
        q,
    )
    return model


def _check_dims(model, X):
    if X.shape[1] != model.n_features:
        raise DimensionMismatchError(f"LDA fitted on D={model.n_features}, got D={X.shape[1]}")


def decision_scores(model, m):
    """Linear discriminant score of every row for every class, shape (N, C)."""
    X = as_array(m)
    _check_dims(model, X)
    return X @ model.coef.T + model.intercept


def predict_codes(model, m):
    scores = decision_scores(model, m)
    best = scores.max(axis=1, keepdims=True)
    tied = scores >= best - TIE_TOLERANCE * np.maximum(1.0, np.abs(best))
    return np.argmax(tied, axis=1)


def predict(model, m):
    """Most likely class of every row; ties go to the lowest class index."""
    return [model.class_names[i] for i in predict_codes(model, m)]


def transform_ld(model, m, axes=None):
    """
    Scores on the discriminant axes.

    Parameters
    ----------
    model : LdaModel
    m : EmbeddingMatrix or array
    axes : list[int], optional
        0-based axis indices (LD1 is 0); all axes when omitted.
    """
    X = as_array(m)
    _check_dims(model, X)
    idx = np.arange(model.n_axes) if axes is None else np.asarray(axes, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= model.n_axes):
        raise ValidationError(f"axis index out of range, model has {model.n_axes} axes")
    return (X - model.mean) @ model.discriminant_axes[idx].T


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows as the true class and columns as the predicted class."""

    counts: np.ndarray
    class_names: tuple

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total)

    def to_frame(self):
        return pd.DataFrame(
            self.counts,
            index=pd.Index(self.class_names, name="true"),
            columns=pd.Index(self.class_names, name="predicted"),
        )

    def to_dict(self):
        return {
            "class_names": list(self.class_names),
            "counts": self.counts.tolist(),
            "accuracy": self.accuracy,
        }


def evaluate(model, test, labels=None):
    """
    Accuracy and confusion matrix on held-out rows.

    Returns
    -------
    accuracy : float
    confusion : ConfusionMatrix
    """
    if labels is None:
        labels = _labels_of(test)
    truth = _encode(labels, model.class_names)
    if truth.size == 0:
        raise ValidationError("test set is empty")
    predicted = predict_codes(model, test)
    if predicted.size != truth.size:
        raise DimensionMismatchError(f"{truth.size} labels for {predicted.size} rows")
    counts = confusion_matrix(truth, predicted, labels=np.arange(len(model.class_names)))
    cm = ConfusionMatrix(counts.astype(int), model.class_names)
    return cm.accuracy, cm


def compare_embedders(embedders, s, shrinkage=None):
    """
    LDA test accuracy for several embedders of the same samples.

    Parameters
    ----------
    embedders : dict
        ``name -> (EmbeddingMatrix, labels)``.
    s : SplitSpec

    Returns
    -------
    DataFrame
        Columns ``embedder, dims, n_train, n_test, accuracy``.
    """
    rows = []
    for name, (m, labels) in embedders.items():
        (train, train_labels), (test, test_labels) = split(labels, m, s)
        class_names = sorted(set(_labels_of(labels)))
        model = fit_lda(train, train_labels, shrinkage=shrinkage, class_names=class_names)
        accuracy, _ = evaluate(model, test, test_labels)
        logger.info("%s: LDA test accuracy %.3f", name, accuracy)
        rows.append(
            {
                "embedder": name,
                "dims": m.dims,
                "n_train": train.rows,
                "n_test": test.rows,
                "accuracy": accuracy,
            }
        )
    return pd.DataFrame(rows, columns=["embedder", "dims", "n_train", "n_test", "accuracy"])
