"""Two-stage region-based object detector built on a numpy autodiff core.

The package trains a region proposal network and a per-region detection
head over a shared convolutional backbone, using 4-step alternating
optimization, and ships a synthetic electrical-equipment dataset generator
for end-to-end exercise of the pipeline.
"""

from .autodiff import Tensor, backward
from .boxes import Box, BoxDelta, decode, encode, iou
from .config import ExperimentConfig, config_hash, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    DetectorError,
    NumericError,
    ShapeError,
)
from .evaluation import DetectionRecord, mean_ap
from .inference import detect_split, run_detector
from .synthetic import SyntheticConfig, generate_synthetic_dataset
from .training import alternate_train_4step

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward",
    "Box", "BoxDelta", "iou", "encode", "decode",
    "ExperimentConfig", "load_config", "config_hash",
    "DetectorError", "ShapeError", "ConfigError", "ContractError",
    "NumericError", "DatasetError", "CheckpointError",
    "DetectionRecord", "mean_ap",
    "run_detector", "detect_split",
    "SyntheticConfig", "generate_synthetic_dataset",
    "alternate_train_4step",
    "__version__",
]
