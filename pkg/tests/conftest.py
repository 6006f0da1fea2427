import logging

import numpy as np
import pytest

from embed_forensics.ingest import EmbeddingMatrix, LabeledDataset
from embed_forensics.ingest.stub_service import StubEmbeddingService


# urllib3 generates a lot of DEBUG logging output when
# all I want to see is the embed_forensics DEBUG output
# so explicitly turn off urllib3 logging
logging.getLogger("urllib3").setLevel(level=logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(20240117)


@pytest.fixture
def stub_service():
    """
    A factory-as-a-fixture.

    Every stub started through the factory is stopped at teardown.
    """
    started = []

    def stub_service_(**kwargs):
        stub = StubEmbeddingService(**kwargs).start()
        started.append(stub)
        return stub

    yield stub_service_
    for stub in started:
        stub.stop()


def make_clusters(rng, n_per_class, dims, separation, n_classes=2, noise=1.0):
    """
    Gaussian classes whose means sit ``separation`` apart along random
    orthogonal directions.

    Returns
    -------
    values : array
    labels : list[str]
        "c0", "c1", ...
    """
    directions, _ = np.linalg.qr(rng.normal(size=(dims, max(n_classes, 1))))
    values, labels = [], []
    for c in range(n_classes):
        center = separation * directions[:, c] if c else np.zeros(dims)
        values.append(center + noise * rng.normal(size=(n_per_class, dims)))
        labels.extend([f"c{c}"] * n_per_class)
    return np.vstack(values), labels


@pytest.fixture
def clusters():
    """A factory for labelled cluster data as (LabeledDataset, EmbeddingMatrix)."""

    def clusters_(seed=0, n_per_class=50, dims=5, separation=10.0, n_classes=2, texts=None):
        values, labels = make_clusters(
            np.random.default_rng(seed), n_per_class, dims, separation, n_classes
        )
        ids = [f"s{j:04d}" for j in range(len(labels))]
        d = LabeledDataset.from_columns(ids, labels, texts)
        return d, EmbeddingMatrix(values, ids, labels)

    return clusters_


@pytest.fixture
def cluster_arrays():
    """:func:`make_clusters` for tests that want bare arrays."""
    return make_clusters
