"""Standardization, PCA, scree elbows and 1-D kernel density estimates."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import DegenerateInputError, DimensionMismatchError, NonFiniteError, ValidationError

logger = logging.getLogger(__name__)

# Component budgets used for the contamination study, keyed by reference size.
RECORDED_PC_BUDGETS = {100: 20, 200: 20, 300: 30, 400: 30, 500: 40, 1000: 50, 2000: 50}


def as_array(m):
    """The values of an EmbeddingMatrix, or ``m`` itself as a 2-D float array."""
    values = getattr(m, "values", m)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got shape {values.shape}")
    return values


def _rewrap(m, values):
    if hasattr(m, "with_values"):
        return m.with_values(values)
    return values


@dataclass(frozen=True)
class Scaler:
    """Per-dimension mean and population standard deviation."""

    means: np.ndarray
    stds: np.ndarray
    constant_dims: frozenset


def fit_scaler(m):
    """
    Fit a standardizing scaler.

    Parameters
    ----------
    m : EmbeddingMatrix or array
        Shape (N, D), N >= 2.

    Returns
    -------
    Scaler
    """
    X = as_array(m)
    if X.shape[0] < 2:
        raise ValidationError(f"need at least 2 rows to standardize, got {X.shape[0]}")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    constant = frozenset(int(i) for i in np.flatnonzero(stds == 0))
    return Scaler(means, stds, constant)


def transform(s, m):
    """Standardize ``m``; constant dimensions map to 0."""
    X = as_array(m)
    if X.shape[1] != s.means.shape[0]:
        raise DimensionMismatchError(
            f"scaler fitted on D={s.means.shape[0]}, got D={X.shape[1]}"
        )
    safe = np.where(s.stds == 0, 1.0, s.stds)
    Z = (X - s.means) / safe
    if s.constant_dims:
        Z[:, sorted(s.constant_dims)] = 0.0
    return _rewrap(m, Z)


@dataclass(frozen=True)
class PcaModel:
    """
    Fitted principal components.

    ``components`` rows are the orthonormal loadings PC1..PCK.
    """

    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    n_fitted: int

    @property
    def n_components(self):
        return self.components.shape[0]


def _orient(components):
    """Flip each row so its largest-magnitude entry is positive."""
    lead = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), lead])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(m, k):
    """
    Principal component analysis via the SVD of the centered data.

    Parameters
    ----------
    m : EmbeddingMatrix or array
        Shape (N, D).
    k : int
        Number of components, 1 <= k <= min(N - 1, D).

    Returns
    -------
    PcaModel
        ``explained_variance`` uses the N - 1 convention.
    """
    X = as_array(m)
    n, d = X.shape
    if n < 2:
        raise ValidationError(f"need at least 2 rows for PCA, got {n}")
    if not np.isfinite(X).all():
        raise NonFiniteError("PCA input contains non-finite values")
    k = int(k)
    if not 1 <= k <= min(n - 1, d):
        raise ValidationError(f"k must be in [1, {min(n - 1, d)}], got {k}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    variances = s**2 / (n - 1)
    total = variances.sum()
    if total == 0:
        raise DegenerateInputError("all rows are identical")
    model = PcaModel(
        components=_orient(vt[:k]),
        explained_variance=variances[:k],
        explained_variance_ratio=variances[:k] / total,
        mean=mean,
        n_fitted=n,
    )
    logger.info(
        "fitted PCA: N=%d D=%d K=%d, cumulative ratio %.3f",
        n,
        d,
        k,
        model.explained_variance_ratio.sum(),
    )
    return model


def project(p, m, components=None):
    """
    Scores of ``m`` on the selected principal components.

    Parameters
    ----------
    p : PcaModel
    m : EmbeddingMatrix or array
    components : list[int], optional
        0-based component indices; all components when omitted.

    Returns
    -------
    scores : array
        Shape (N, len(components)).
    """
    X = as_array(m)
    if X.shape[1] != p.mean.shape[0]:
        raise DimensionMismatchError(f"PCA fitted on D={p.mean.shape[0]}, got D={X.shape[1]}")
    idx = np.arange(p.n_components) if components is None else np.asarray(components, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= p.n_components):
        raise ValidationError(f"component index out of range for K={p.n_components}")
    return (X - p.mean) @ p.components[idx].T


def reconstruct(p, scores):
    """Map full K-column scores back into the data space."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != p.n_components:
        raise DimensionMismatchError(f"expected (N, {p.n_components}) scores")
    return scores @ p.components + p.mean


def scree_elbow(variances):
    """
    Component budget at the elbow of a scree curve.

    Both axes are rescaled to [0, 1] and the component farthest from the
    chord joining the first and last points is returned, so the answer does
    not change when the variances are rescaled. Ties go to the lowest index.

    Parameters
    ----------
    variances : array
        Non-increasing explained variances, at least 3 of them.

    Returns
    -------
    int
        1-based component number.
    """
    v = np.asarray(variances, dtype=np.float64)
    if v.ndim != 1 or v.size < 3:
        raise ValidationError(f"need at least 3 variances, got {v.size}")
    if np.any(np.diff(v) > 0):
        raise ValidationError("scree variances must be non-increasing")
    span = v[0] - v[-1]
    if span == 0:
        return 1
    x = np.linspace(0.0, 1.0, v.size)
    y = (v - v[-1]) / span
    # chord runs from (0, 1) to (1, 0)
    distance = np.abs(1.0 - x - y) / np.sqrt(2.0)
    best = np.flatnonzero(distance >= distance.max() - 1e-12)[0]
    return int(best) + 1


def recorded_pc_budget(n_reference):
    """Fixed PC budget used for a reference sample of ``n_reference`` rows."""
    try:
        return RECORDED_PC_BUDGETS[int(n_reference)]
    except KeyError:
        raise ValidationError(
            f"no recorded budget for N={n_reference}; use the scree elbow"
        ) from None


def scree_table(p):
    """Scree data as a ``component,variance,ratio,cumulative`` frame."""
    return pd.DataFrame(
        {
            "component": np.arange(1, p.n_components + 1),
            "variance": p.explained_variance,
            "ratio": p.explained_variance_ratio,
            "cumulative": np.cumsum(p.explained_variance_ratio),
        }
    )


def cumulative_at(p, budget):
    """Fraction of total variance carried by the first ``budget`` components."""
    if not 1 <= budget <= p.n_components:
        raise ValidationError(f"budget must be in [1, {p.n_components}]")
    return float(np.sum(p.explained_variance_ratio[:budget]))


@dataclass(frozen=True)
class KdeModel:
    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).ravel()
        if points.size < 2:
            raise ValidationError(f"KDE needs at least 2 points, got {points.size}")
        if not np.isfinite(points).all():
            raise NonFiniteError("KDE points contain non-finite values")
        if not self.bandwidth > 0:
            raise ValidationError(f"bandwidth must be > 0, got {self.bandwidth}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))


def scott_bandwidth(points):
    points = np.asarray(points, dtype=np.float64).ravel()
    return float(np.std(points, ddof=1) * points.size ** (-1 / 5))


def fit_kde(points, bandwidth=None):
    """Gaussian KDE, with Scott's rule when no bandwidth is given."""
    if bandwidth is None:
        bandwidth = scott_bandwidth(points)
        if bandwidth == 0:
            raise DegenerateInputError("all KDE points are identical; give a bandwidth")
    return KdeModel(points, bandwidth)


def kde_eval(k, xs):
    """
    Evaluate the density at the query points.

    f(x) = 1 / (N h) * sum_i phi((x - x_i) / h)
    """
    xs = np.asarray(xs, dtype=np.float64)
    z = (xs[..., None] - k.points) / k.bandwidth
    return norm.pdf(z).mean(axis=-1) / k.bandwidth


def group_kde(scores, indicator, grid, bandwidth=None):
    """
    One density per indicator value, evaluated on ``grid``.

    Returns
    -------
    dict
        ``{0: densities, 1: densities}`` for the groups with at least 2 points.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    indicator = np.asarray(indicator).ravel()
    if scores.shape != indicator.shape:
        raise DimensionMismatchError("scores and indicator differ in length")
    out = {}
    for value in (0, 1):
        members = scores[indicator == value]
        if members.size >= 2:
            out[value] = kde_eval(fit_kde(members, bandwidth), grid)
    return out
