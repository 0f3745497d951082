"""From-scratch spatio-temporal action recognition: autodiff, cells, attention, models, training."""

from .checkpoint import Checkpoint
from .data import ClipRecord, DatasetManifest, SplitSpec, load_dataset, sample_window, split_by_subject, write_dataset
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    IngestionError,
    NumericError,
    SthArError,
    TrainingError,
)
from .models import MODEL_KINDS, Model, ModelConfig, predict, tiny_config
from .synth import SyntheticSpec, synth_generate
from .tensor import Tensor, no_grad
from .training import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "Checkpoint",
    "CheckpointError",
    "ClipRecord",
    "ConfigError",
    "ContractError",
    "DatasetManifest",
    "DimensionError",
    "IngestionError",
    "MODEL_KINDS",
    "Metrics",
    "Model",
    "ModelConfig",
    "NumericError",
    "SplitSpec",
    "SthArError",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "evaluate",
    "load_dataset",
    "no_grad",
    "predict",
    "sample_window",
    "split_by_subject",
    "synth_generate",
    "tiny_config",
    "train",
    "write_dataset",
]
