from .dataset import (  # noqa: F401
    EmbeddingMatrix,
    LabeledDataset,
    Sample,
    dataset_from_matrix,
    join,
    load_dataset,
    record_label,
    restrict_labels,
    save_dataset,
)
from .formats import FORMATS, load_embeddings, manifest_path, save_embeddings  # noqa: F401
from .preprocess import IMAGE_MEAN, IMAGE_STD, pool_and_normalize, preprocess_image  # noqa: F401
from .service import (  # noqa: F401
    EmbeddingServiceConfig,
    EmbeddingServiceSession,
    fetch_embeddings,
)
