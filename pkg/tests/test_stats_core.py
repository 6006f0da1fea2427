import numpy as np
import pytest
from scipy.integrate import quad

from embed_forensics.errors import DegenerateInputError, DimensionMismatchError, ValidationError
from embed_forensics.ingest import EmbeddingMatrix
from embed_forensics.stats_core import (
    RECORDED_PC_BUDGETS,
    cumulative_at,
    fit_kde,
    fit_pca,
    fit_scaler,
    group_kde,
    kde_eval,
    project,
    reconstruct,
    recorded_pc_budget,
    scott_bandwidth,
    scree_elbow,
    scree_table,
    transform,
)


def test_scaler_example():
    s = fit_scaler(np.array([[0.0, 2.0], [2.0, 2.0]]))
    assert s.means.tolist() == [1.0, 2.0]
    assert s.stds.tolist() == [1.0, 0.0]
    assert s.constant_dims == frozenset({1})
    z = transform(s, np.array([[0.0, 2.0], [2.0, 2.0], [4.0, 7.0]]))
    assert z.tolist() == [[-1.0, 0.0], [1.0, 0.0], [3.0, 0.0]]


def test_scaler_needs_two_rows():
    with pytest.raises(ValidationError):
        fit_scaler(np.ones((1, 3)))


def test_transform_is_standardized(rng):
    X = rng.normal(loc=3.0, scale=[1.0, 5.0, 0.1], size=(200, 3))
    z = transform(fit_scaler(X), X)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, rtol=1e-12)


def test_transform_keeps_matrix_metadata():
    m = EmbeddingMatrix([[0.0, 1.0], [2.0, 3.0]], ["a", "b"], ["x", "y"])
    z = transform(fit_scaler(m), m)
    assert isinstance(z, EmbeddingMatrix)
    assert z.sample_ids == ("a", "b")
    assert z.labels == ("x", "y")


def test_transform_dimension_mismatch():
    s = fit_scaler(np.ones((3, 2)))
    with pytest.raises(DimensionMismatchError):
        transform(s, np.ones((3, 3)))


def test_pca_matches_covariance_eigenvectors(rng):
    for _ in range(100):
        n, d = rng.integers(5, 30), rng.integers(2, 8)
        X = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, size=d)
        k = min(n - 1, d)
        p = fit_pca(X, k)
        evals, evecs = np.linalg.eigh(np.cov(X, rowvar=False))
        order = np.argsort(evals)[::-1][:k]
        np.testing.assert_allclose(p.explained_variance, evals[order], rtol=1e-8, atol=1e-10)
        # eigenvectors are unique up to sign for distinct eigenvalues
        overlap = np.abs(np.sum(p.components * evecs[:, order].T, axis=1))
        np.testing.assert_allclose(overlap, 1.0, atol=1e-6)


def test_pca_on_a_line():
    X = np.array([[t, t] for t in range(-3, 4)], dtype=float)
    p = fit_pca(X, 1)
    np.testing.assert_allclose(p.components[0], [2**-0.5, 2**-0.5])
    assert p.explained_variance_ratio[0] == pytest.approx(1.0)


def test_pca_square_has_equal_variances():
    X = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    p = fit_pca(X, 2)
    np.testing.assert_allclose(p.explained_variance, [4 / 3, 4 / 3])
    np.testing.assert_allclose(p.explained_variance_ratio, [0.5, 0.5])


def test_pca_components_are_orthonormal(rng):
    p = fit_pca(rng.normal(size=(40, 12)), 6)
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(6), atol=1e-12)
    assert np.all(np.diff(p.explained_variance) <= 0)


@pytest.mark.parametrize("shape", [(30, 8), (6, 15), (50, 50)])
def test_pca_variance_is_conserved_and_scores_uncorrelated(rng, shape):
    X = rng.normal(size=shape) @ rng.normal(size=(shape[1], shape[1]))
    k = min(shape[0] - 1, shape[1])
    p = fit_pca(X, k)
    total = X.var(axis=0, ddof=1).sum()
    assert p.explained_variance.sum() == pytest.approx(total, rel=1e-10)
    scores = project(p, X)
    cov = np.cov(scores, rowvar=False)
    np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-8 * total)
    np.testing.assert_allclose(np.diag(cov), p.explained_variance, atol=1e-8 * total)


def test_pca_full_rank_reconstruction(rng):
    X = rng.normal(size=(20, 4))
    p = fit_pca(X, 4)
    np.testing.assert_allclose(reconstruct(p, project(p, X)), X, atol=1e-10)


def test_project_selected_components(rng):
    X = rng.normal(size=(20, 5))
    p = fit_pca(X, 3)
    full = project(p, X)
    np.testing.assert_allclose(project(p, X, [2, 0]), full[:, [2, 0]])
    with pytest.raises(ValidationError):
        project(p, X, [3])


@pytest.mark.parametrize("k", [0, 5])
def test_pca_component_count_bounds(k):
    with pytest.raises(ValidationError):
        fit_pca(np.arange(10.0).reshape(5, 2), k)


def test_pca_identical_rows():
    with pytest.raises(DegenerateInputError):
        fit_pca(np.ones((5, 3)), 1)


@pytest.mark.parametrize(
    "variances, expected",
    [
        ([10.0, 9.0, 1.0, 0.9, 0.8], 3),
        ([5.0, 4.0, 3.0, 2.0, 1.0], 1),
        ([100.0, 10.0, 1.0, 0.5, 0.25, 0.1], 2),
        ([2.0, 2.0, 2.0], 1),
    ],
)
def test_scree_elbow_examples(variances, expected):
    assert scree_elbow(variances) == expected


def test_scree_elbow_is_scale_invariant(rng):
    for _ in range(20):
        v = np.sort(rng.exponential(size=12))[::-1]
        assert scree_elbow(v) == scree_elbow(1000.0 * v) == scree_elbow(1e-3 * v)


@pytest.mark.parametrize("variances", [[1.0, 2.0, 0.5], [3.0, 1.0]])
def test_scree_elbow_rejects(variances):
    with pytest.raises(ValidationError):
        scree_elbow(variances)


def test_recorded_budgets():
    assert recorded_pc_budget(1000) == 50
    assert recorded_pc_budget(300) == 30
    assert set(RECORDED_PC_BUDGETS) >= {100, 200, 300, 400, 500, 1000, 2000}
    with pytest.raises(ValidationError):
        recorded_pc_budget(123)


def test_scree_table_and_cumulative(rng):
    p = fit_pca(rng.normal(size=(30, 6)), 6)
    table = scree_table(p)
    assert list(table.columns) == ["component", "variance", "ratio", "cumulative"]
    assert table["component"].tolist() == [1, 2, 3, 4, 5, 6]
    assert table["cumulative"].iloc[-1] == pytest.approx(1.0)
    assert cumulative_at(p, 2) == pytest.approx(table["cumulative"].iloc[1])
    with pytest.raises(ValidationError):
        cumulative_at(p, 7)


def test_kde_of_two_identical_points():
    k = fit_kde([1.5, 1.5], bandwidth=0.5)
    assert kde_eval(k, 1.5) == pytest.approx(1.0 / (0.5 * np.sqrt(2.0 * np.pi)))


def test_kde_integrates_to_one(rng):
    k = fit_kde(rng.normal(size=50))
    mass, _ = quad(lambda x: float(kde_eval(k, x)), -20.0, 20.0, limit=200)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_kde_is_symmetric_for_symmetric_points():
    k = fit_kde([-2.0, -0.5, 0.5, 2.0])
    xs = np.linspace(0.0, 4.0, 9)
    np.testing.assert_allclose(kde_eval(k, xs), kde_eval(k, -xs))


def test_scott_bandwidth():
    points = np.array([0.0, 1.0, 2.0, 3.0])
    expected = np.std(points, ddof=1) * 4 ** (-1 / 5)
    assert scott_bandwidth(points) == pytest.approx(expected)


def test_kde_rejects():
    with pytest.raises(ValidationError):
        fit_kde([1.0])
    with pytest.raises(DegenerateInputError):
        fit_kde([1.0, 1.0])
    with pytest.raises(ValidationError):
        fit_kde([1.0, 2.0], bandwidth=0.0)


def test_group_kde():
    scores = np.array([-1.0, -1.2, -0.8, 1.0, 1.1, 3.0])
    indicator = np.array([0, 0, 0, 1, 1, 1])
    grid = np.linspace(-3, 5, 17)
    out = group_kde(scores, indicator, grid, bandwidth=0.3)
    assert set(out) == {0, 1}
    assert grid[np.argmax(out[0])] == pytest.approx(-1.0)
    assert grid[np.argmax(out[1])] == pytest.approx(1.0)


def test_group_kde_skips_small_groups():
    out = group_kde([0.0, 1.0, 2.0], [0, 0, 1], np.linspace(-1, 3, 5))
    assert set(out) == {0}
