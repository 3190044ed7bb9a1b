"""Transductive zero-shot learning as semantic-visual pair domain adaptation.

The library pairs image features with (encoded) per-category attribute
vectors, scores the pairs with a shared metric network, and aligns the two
domains with domain-specific batch normalization. All numerics are 64-bit
with a fixed reduction order, so runs are bit-reproducible per seed.
"""

from .backend import active_backend
from .data import (
    SyntheticSpec,
    ZslDataset,
    generate_synthetic,
    load_dataset,
    standardize_features,
)
from .inference import label_propagation, mca, predict_argmax, score_target
from .model import AlignmentMode, Model, build_model
from .training import (
    Adam,
    TrainConfig,
    build_model_for,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "active_backend",
    "AlignmentMode",
    "Adam",
    "Model",
    "SyntheticSpec",
    "TrainConfig",
    "ZslDataset",
    "build_model",
    "build_model_for",
    "generate_synthetic",
    "label_propagation",
    "load_checkpoint",
    "load_dataset",
    "mca",
    "predict_argmax",
    "save_checkpoint",
    "score_target",
    "standardize_features",
    "train",
    "__version__",
]
