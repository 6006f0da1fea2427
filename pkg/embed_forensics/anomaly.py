"""
Isolation-forest contamination detection.

Trees are stored in heap layout (node ``i`` has children ``2i + 1`` and
``2i + 2``) as ``(n_trees, n_nodes)`` arrays, so growing and scoring a whole
forest is a handful of numpy operations per tree level.

Every tree draws from its own child of ``SeedSequence(seed)``, which makes
the first ``t`` trees of a forest identical to a ``t``-tree forest grown
with the same seed. Tree-count tuning relies on this.
"""

import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import auc, roc_curve

from .errors import DimensionMismatchError, NonFiniteError, ValidationError
from .stats_core import as_array, fit_pca, fit_scaler, recorded_pc_budget, project, scree_elbow
from .stats_core import transform as standardize

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
# harmonic numbers are summed exactly up to here
EXACT_HARMONIC_LIMIT = 10_000
_HARMONIC = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, EXACT_HARMONIC_LIMIT + 1))])

DEFAULT_SUBSAMPLE = 256
TREE_GRID = (10, 25, 50, 100, 150, 200)
# rows scored per block
SCORE_CHUNK = 4096

REFERENCE_SIZES = (100, 200, 300, 400, 500, 1000, 2000)
CONTAMINANT_COUNTS = (1, 2, 4, 6, 8, 10, 12, 15, 20)


def harmonic_number(n):
    """H(n), exact for n <= 10^4 and ln(n) + gamma + 1 / (2n) beyond."""
    n = np.asarray(n)
    exact = _HARMONIC[np.clip(n, 0, EXACT_HARMONIC_LIMIT).astype(int)]
    with np.errstate(divide="ignore", invalid="ignore"):
        approx = np.log(n) + EULER_GAMMA + 0.5 / n
    out = np.where(n <= EXACT_HARMONIC_LIMIT, exact, approx)
    return out if out.ndim else float(out)


def average_path_length(n):
    """
    c(n) = 2 H(n - 1) - 2 (n - 1) / n, the mean unsuccessful-search depth of
    a binary search tree on n points. c(0) = c(1) = 0 and c(2) = 1.
    """
    n = np.asarray(n, dtype=np.float64)
    safe = np.maximum(n, 2.0)
    c = 2.0 * harmonic_number(safe - 1.0) - 2.0 * (safe - 1.0) / safe
    out = np.where(n < 2, 0.0, c)
    return out if out.ndim else float(out)


IsolationTree = namedtuple("IsolationTree", ["split_dim", "split_value", "node_size"])


@dataclass(frozen=True)
class IsolationForestModel:
    """
    A fitted isolation forest.

    ``split_dim`` is -1 at leaves. ``node_size`` counts the subsample rows
    that reached each node, and is 0 for nodes no row reached.
    """

    split_dim: np.ndarray
    split_value: np.ndarray
    node_size: np.ndarray
    subsample_indices: np.ndarray
    subsample_size: int
    height_limit: int
    n_features: int
    seed: int

    @property
    def n_trees(self):
        return self.split_dim.shape[0]

    def tree(self, t):
        return IsolationTree(self.split_dim[t], self.split_value[t], self.node_size[t])

    def prefix(self, n_trees):
        """The forest made of the first ``n_trees`` trees."""
        if not 1 <= n_trees <= self.n_trees:
            raise ValidationError(f"n_trees must be in [1, {self.n_trees}], got {n_trees}")
        return IsolationForestModel(
            self.split_dim[:n_trees],
            self.split_value[:n_trees],
            self.node_size[:n_trees],
            self.subsample_indices[:n_trees],
            self.subsample_size,
            self.height_limit,
            self.n_features,
            self.seed,
        )

    def depths(self):
        """Depth of the deepest used node of every tree."""
        used = self.node_size > 0
        level = np.floor(np.log2(np.arange(self.split_dim.shape[1]) + 1)).astype(int)
        return np.where(used, level, 0).max(axis=1)


def _as_rows(scores):
    X = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return as_array(X)


def fit_forest(scores, n_trees=100, subsample=None, seed=0):
    """
    Grow an isolation forest.

    Each node splits a dimension drawn uniformly among the dimensions its
    rows do not all share, at a uniform point between their min and max.
    Growth stops at the height limit or when a node's rows are identical
    (in particular at a single row).

    Parameters
    ----------
    scores : array
        Shape (N, P), or (N,) for one dimension.
    n_trees : int
    subsample : int, optional
        Rows drawn without replacement per tree; defaults to min(256, N).
    seed : int

    Returns
    -------
    IsolationForestModel
    """
    X = _as_rows(scores)
    n, p = X.shape
    if n < 2:
        raise ValidationError(f"need at least 2 rows, got {n}")
    if not np.isfinite(X).all():
        raise NonFiniteError("forest input contains non-finite values")
    if n_trees < 1:
        raise ValidationError(f"n_trees must be >= 1, got {n_trees}")
    psi = min(DEFAULT_SUBSAMPLE, n) if subsample is None else int(subsample)
    if psi > n:
        raise ValidationError(f"subsample size {psi} exceeds the {n} available rows")
    if psi < 2:
        raise ValidationError(f"subsample size must be >= 2, got {psi}")

    height = int(np.ceil(np.log2(psi)))
    n_internal = 2**height - 1
    n_nodes = 2 ** (height + 1) - 1

    subsample_indices = np.empty((n_trees, psi), dtype=int)
    dim_draws = np.empty((n_trees, n_internal))
    uniforms = np.empty((n_trees, n_internal))
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(n_trees)):
        rng = np.random.default_rng(child)
        subsample_indices[t] = rng.choice(n, psi, replace=False)
        dim_draws[t] = rng.random(n_internal)
        uniforms[t] = rng.random(n_internal)

    Xs = X[subsample_indices]
    split_dim = np.full(n_trees * n_nodes, -1, dtype=int)
    split_value = np.zeros(n_trees * n_nodes)
    node_size = np.zeros(n_trees * n_nodes, dtype=int)
    node = np.zeros((n_trees, psi), dtype=int)

    for level in range(height):
        # rows already sitting in a leaf have a node id below this level
        t_idx, p_idx = np.nonzero(node >= 2**level - 1)
        if t_idx.size == 0:
            break
        here = node[t_idx, p_idx]
        key = t_idx * n_nodes + here
        np.add.at(node_size, key, 1)

        # per-node bounds of every dimension
        order = np.argsort(key, kind="stable")
        sorted_key = key[order]
        starts = np.flatnonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])
        rows = Xs[t_idx, p_idx][order]
        lo = np.minimum.reduceat(rows, starts, axis=0)
        hi = np.maximum.reduceat(rows, starts, axis=0)
        nodes = sorted_key[starts]
        t_node, at_node = np.divmod(nodes, n_nodes)

        # the split dimension is drawn among those that still vary; a node of
        # identical rows is a leaf
        varying = hi > lo
        n_varying = varying.sum(axis=1)
        splits = n_varying > 0
        pick = np.minimum(
            (dim_draws[t_node, at_node] * n_varying).astype(int), np.maximum(n_varying - 1, 0)
        )
        d = np.argmax(np.cumsum(varying, axis=1) > pick[:, None], axis=1)
        j = np.arange(nodes.size)
        value = lo[j, d] + uniforms[t_node, at_node] * (hi[j, d] - lo[j, d])
        split_dim[nodes[splits]] = d[splits]
        split_value[nodes[splits]] = value[splits]

        group = np.empty(key.size, dtype=int)
        group[order] = np.repeat(j, np.diff(np.r_[starts, key.size]))
        v = Xs[t_idx, p_idx, d[group]]
        child = np.where(v < value[group], 2 * here + 1, 2 * here + 2)
        node[t_idx, p_idx] = np.where(splits[group], child, here)

    t_idx, p_idx = np.nonzero(node >= n_internal)
    np.add.at(node_size, t_idx * n_nodes + node[t_idx, p_idx], 1)

    model = IsolationForestModel(
        split_dim=split_dim.reshape(n_trees, n_nodes),
        split_value=split_value.reshape(n_trees, n_nodes),
        node_size=node_size.reshape(n_trees, n_nodes),
        subsample_indices=subsample_indices,
        subsample_size=psi,
        height_limit=height,
        n_features=p,
        seed=seed,
    )
    logger.debug("grew %d trees: psi=%d height=%d P=%d", n_trees, psi, height, p)
    return model


def path_lengths(model, rows):
    """
    Path length of every row in every tree, shape (n_trees, N).

    Rows stopping at a leaf holding ``k`` subsample rows get ``c(k)`` added
    to their depth.
    """
    X = _as_rows(rows)
    if X.shape[1] != model.n_features:
        raise DimensionMismatchError(
            f"forest fitted on P={model.n_features}, got P={X.shape[1]}"
        )
    n_trees = model.n_trees
    out = np.empty((n_trees, X.shape[0]))
    tree_idx = np.arange(n_trees)[:, None]
    for start in range(0, X.shape[0], SCORE_CHUNK):
        block = X[start : start + SCORE_CHUNK]
        row_idx = np.arange(block.shape[0])[None, :]
        node = np.zeros((n_trees, block.shape[0]), dtype=int)
        depth = np.zeros_like(node)
        for _ in range(model.height_limit):
            d = model.split_dim[tree_idx, node]
            internal = d >= 0
            if not internal.any():
                break
            xv = block[row_idx, np.maximum(d, 0)]
            child = np.where(xv < model.split_value[tree_idx, node], 2 * node + 1, 2 * node + 2)
            node = np.where(internal, child, node)
            depth += internal
        out[:, start : start + block.shape[0]] = depth + average_path_length(
            model.node_size[tree_idx, node]
        )
    return out


def scores_from_paths(paths, subsample_size):
    """Anomaly score 2^(-mean path / c(psi)) from a (n_trees, N) path matrix."""
    return 2.0 ** (-np.mean(paths, axis=0) / average_path_length(subsample_size))


def score(model, rows):
    """Anomaly score of every row; higher is more anomalous."""
    return scores_from_paths(path_lengths(model, rows), model.subsample_size)


def _prefix_scores(paths, counts, subsample_size):
    """Scores of the forests made of the first ``t`` trees, one row per count."""
    running = np.cumsum(paths, axis=0)
    c = average_path_length(subsample_size)
    return np.stack([2.0 ** (-running[t - 1] / t / c) for t in counts])


@dataclass(frozen=True)
class RocCurve:
    """
    A ROC curve from (0, 0) to (1, 1).

    ``thresholds`` are decreasing, starting at +inf; they are empty for a
    median curve.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float
    thresholds: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        fpr = np.asarray(self.fpr, dtype=np.float64)
        tpr = np.asarray(self.tpr, dtype=np.float64)
        if fpr.shape != tpr.shape or fpr.ndim != 1 or fpr.size < 2:
            raise ValidationError("fpr and tpr must be matching vectors of at least 2 points")
        if np.any(np.diff(fpr) < 0) or np.any(np.diff(tpr) < 0):
            raise ValidationError("fpr and tpr must be non-decreasing")
        object.__setattr__(self, "fpr", fpr)
        object.__setattr__(self, "tpr", tpr)
        object.__setattr__(self, "thresholds", np.asarray(self.thresholds, dtype=np.float64))
        object.__setattr__(self, "auroc", float(self.auroc))

    def to_frame(self):
        frame = pd.DataFrame({"fpr": self.fpr, "tpr": self.tpr})
        if self.thresholds.size == self.fpr.size:
            frame["threshold"] = self.thresholds
        return frame

    def to_dict(self):
        return {"fpr": self.fpr.tolist(), "tpr": self.tpr.tolist(), "auroc": self.auroc}


def _check_truth(scores, truth):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise DimensionMismatchError(f"{truth.size} truth values for {scores.size} scores")
    if not np.isin(truth, (0, 1)).all():
        raise ValidationError("truth values must be 0 or 1")
    if truth.min() == truth.max():
        raise ValidationError("truth must contain both positives and negatives")
    return scores, truth.astype(int)


def roc(scores, truth):
    """
    ROC curve sweeping a threshold over every distinct score.

    The trapezoid area equals the Mann-Whitney statistic with ties counted
    as one half.
    """
    scores, truth = _check_truth(scores, truth)
    fpr, tpr, thresholds = roc_curve(truth, scores, drop_intermediate=False)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    thresholds[0] = np.inf
    return RocCurve(fpr=fpr, tpr=tpr, auroc=auc(fpr, tpr), thresholds=thresholds)


def auroc(scores, truth):
    return roc(scores, truth).auroc


def median_roc(curves, grid=None):
    """
    Median TPR across curves on a common FPR grid.

    Parameters
    ----------
    curves : list[RocCurve]
    grid : array, optional
        FPR values in [0, 1]; 101 evenly spaced points by default.
    """
    if not curves:
        raise ValidationError("need at least one ROC curve")
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid, dtype=np.float64)
    tprs = np.stack([np.interp(grid, c.fpr, c.tpr) for c in curves])
    tpr = np.median(tprs, axis=0)
    tpr = np.maximum.accumulate(tpr)
    if grid[0] == 0:
        tpr[0] = 0.0
    if grid[-1] == 1:
        tpr[-1] = 1.0
    return RocCurve(fpr=grid, tpr=tpr, auroc=auc(grid, tpr))


def _grid_for(max_trees, grid=TREE_GRID):
    counts = [t for t in grid if t <= max_trees]
    return counts or [max_trees]


def _grid_aurocs(scores, truth, counts, seed, subsample):
    model = fit_forest(scores, n_trees=max(counts), subsample=subsample, seed=seed)
    prefix = _prefix_scores(path_lengths(model, scores), counts, model.subsample_size)
    return prefix, np.array([auroc(s, truth) for s in prefix])


def _best_count(mean_aurocs, counts):
    mean_aurocs = np.asarray(mean_aurocs)
    best = np.flatnonzero(mean_aurocs >= mean_aurocs.max() - 1e-12)[0]
    return counts[best], int(best)


def tune_forest(scores, truth, max_trees=200, seeds=50, subsample=None, seed=0):
    """
    Tree count with the highest mean AUROC across seeds.

    Counts come from {10, 25, 50, 100, 150, 200} up to ``max_trees``; ties
    go to the smaller count.

    Returns
    -------
    int
    """
    _check_truth(np.zeros(len(truth)), truth)
    counts = _grid_for(max_trees)
    children = np.random.SeedSequence(seed).spawn(seeds)
    aurocs = np.stack(
        [
            _grid_aurocs(scores, truth, counts, int(c.generate_state(1)[0]), subsample)[1]
            for c in children
        ]
    )
    best, _ = _best_count(aurocs.mean(axis=0), counts)
    logger.debug("tree count search %s -> %d", dict(zip(counts, aurocs.mean(axis=0))), best)
    return best


def cell_seed(root, n_reference, m_contaminants, seed_index):
    """Seed of one (N, M, seed) experiment cell, independent of run order."""
    ss = np.random.SeedSequence(root, spawn_key=(n_reference, m_contaminants, seed_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ContaminationSpec:
    """
    The N x M contamination sweep.

    ``n_pcs`` is a component count, ``"recorded"`` for the recorded budget of
    each reference size, or ``"elbow"`` for the scree elbow of each sample.
    """

    n_reference: tuple = REFERENCE_SIZES
    m_contaminants: tuple = CONTAMINANT_COUNTS
    n_pcs: object = "recorded"
    seeds: int = 50
    max_trees: int = 200
    subsample: int = None
    standardize: bool = True
    pca_on_reference_only: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_reference", "m_contaminants"):
            value = getattr(self, name)
            value = (value,) if np.isscalar(value) else tuple(int(v) for v in value)
            if not value or min(value) < 1:
                raise ValidationError(f"{name} values must all be positive")
            object.__setattr__(self, name, value)
        if isinstance(self.n_pcs, str):
            if self.n_pcs not in ("recorded", "elbow"):
                raise ValidationError(f"n_pcs must be an integer, 'recorded' or 'elbow', got {self.n_pcs!r}")
        elif not 1 <= self.n_pcs <= min(self.n_reference):
            raise ValidationError(f"n_pcs must be in [1, {min(self.n_reference)}], got {self.n_pcs}")
        if self.seeds < 1 or self.max_trees < 1:
            raise ValidationError("seeds and max_trees must be positive")


@dataclass(frozen=True)
class ExperimentResult:
    """
    ``table`` has one row per (N, M, seed); ``summary`` one row per (N, M);
    ``median_roc`` maps N to the median ROC over its cells.
    """

    table: pd.DataFrame
    summary: pd.DataFrame
    median_roc: dict

    def to_dict(self):
        return {
            "summary": self.summary.to_dict(orient="records"),
            "median_roc": {str(n): curve.to_dict() for n, curve in self.median_roc.items()},
        }


def _resolve_pcs(spec, n_reference, fit_rows):
    limit = min(fit_rows.shape[0] - 1, fit_rows.shape[1])
    if spec.n_pcs == "elbow":
        full = fit_pca(fit_rows, limit)
        return scree_elbow(full.explained_variance)
    k = recorded_pc_budget(n_reference) if spec.n_pcs == "recorded" else int(spec.n_pcs)
    if k > limit:
        logger.debug("capping %d components at %d", k, limit)
        k = limit
    return k


def _run_cell(reference, contaminants, spec, n_reference, m_contaminants, seed_index, counts):
    rng = np.random.default_rng(cell_seed(spec.seed, n_reference, m_contaminants, seed_index))
    ref_idx = rng.choice(reference.shape[0], n_reference, replace=False)
    con_idx = rng.choice(contaminants.shape[0], m_contaminants, replace=False)
    X = np.vstack([reference[ref_idx], contaminants[con_idx]])
    truth = np.r_[np.zeros(n_reference, dtype=int), np.ones(m_contaminants, dtype=int)]

    fit_rows = X[:n_reference] if spec.pca_on_reference_only else X
    if spec.standardize:
        scaler = fit_scaler(fit_rows)
        X = standardize(scaler, X)
        fit_rows = X[:n_reference] if spec.pca_on_reference_only else X
    k = _resolve_pcs(spec, n_reference, fit_rows)
    scores = project(fit_pca(fit_rows, k), X)

    forest_seed = int(rng.integers(2**32))
    prefix, aurocs = _grid_aurocs(scores, truth, counts, forest_seed, spec.subsample)
    return prefix, aurocs


def run_contamination_experiment(reference, contaminants, spec, n_jobs=None):
    """
    Contaminate reference samples and measure how well isolation forests
    find the contaminants.

    For every (N, M, seed): sample N reference and M contaminant rows,
    standardize, fit PCA, keep the leading scores, grow a forest and score
    it with the contaminants as positives. The tree count of each (N, M)
    cell is the one with the best mean AUROC over its seeds.

    Parameters
    ----------
    reference, contaminants : EmbeddingMatrix or array
    spec : ContaminationSpec
    n_jobs : int, optional
        Passed to joblib; results do not depend on it.

    Returns
    -------
    ExperimentResult
    """
    reference = as_array(reference)
    contaminants = as_array(contaminants)
    if reference.shape[1] != contaminants.shape[1]:
        raise DimensionMismatchError(
            f"reference D={reference.shape[1]} but contaminants D={contaminants.shape[1]}"
        )
    if max(spec.n_reference) > reference.shape[0]:
        raise ValidationError(
            f"need {max(spec.n_reference)} reference rows, have {reference.shape[0]}"
        )
    if max(spec.m_contaminants) > contaminants.shape[0]:
        raise ValidationError(
            f"need {max(spec.m_contaminants)} contaminant rows, have {contaminants.shape[0]}"
        )
    if isinstance(spec.n_pcs, int) and spec.n_pcs > reference.shape[1]:
        raise ValidationError(f"n_pcs={spec.n_pcs} exceeds D={reference.shape[1]}")

    counts = _grid_for(spec.max_trees)
    cells = [
        (n, m, s)
        for n in spec.n_reference
        for m in spec.m_contaminants
        for s in range(spec.seeds)
    ]
    logger.info(
        "contamination sweep: %d cells x %d seeds, tree grid %s",
        len(cells) // spec.seeds,
        spec.seeds,
        counts,
    )
    runs = Parallel(n_jobs=n_jobs)(
        delayed(_run_cell)(reference, contaminants, spec, n, m, s, counts) for n, m, s in cells
    )

    rows, summary, curves = [], [], {}
    for i in range(0, len(cells), spec.seeds):
        n, m, _ = cells[i]
        block = runs[i : i + spec.seeds]
        aurocs = np.stack([a for _, a in block])
        best, j = _best_count(aurocs.mean(axis=0), counts)
        truth = np.r_[np.zeros(n, dtype=int), np.ones(m, dtype=int)]
        for s, (prefix, _) in enumerate(block):
            rows.append({"N": n, "M": m, "seed": s, "n_trees": best, "auroc": aurocs[s, j]})
            curves.setdefault(n, []).append(roc(prefix[j], truth))
        summary.append(
            {
                "N": n,
                "M": m,
                "n_trees": best,
                "mean_auroc": float(aurocs[:, j].mean()),
                "median_auroc": float(np.median(aurocs[:, j])),
            }
        )
        logger.info("N=%d M=%d: %d trees, mean AUROC %.3f", n, m, best, aurocs[:, j].mean())

    return ExperimentResult(
        table=pd.DataFrame(rows, columns=["N", "M", "seed", "n_trees", "auroc"]),
        summary=pd.DataFrame(
            summary, columns=["N", "M", "n_trees", "mean_auroc", "median_auroc"]
        ),
        median_roc={n: median_roc(c) for n, c in curves.items()},
    )
