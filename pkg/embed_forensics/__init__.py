"""Interpretable forensics of latent embeddings."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401,E402
    ConfigurationError,
    DegenerateInputError,
    DimensionMismatchError,
    DuplicateIdError,
    MalformedRecordError,
    NonFiniteError,
    ServiceError,
    ValidationError,
)
from .ingest import EmbeddingMatrix, LabeledDataset, load_embeddings  # noqa: F401,E402
