"""Image-specific protective perturbations with manipulation detection and localization."""

from .model import PADL, ConfigError, Detection, ModelConfig
from .training import NumericalError, TrainConfig, Trainer
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .manipulator import (DegradationSpec, ManipulationSpec, ToyDataset, degrade, make_toy_images,
                          toy_manipulate)
from .evaluation import EvalReport, evaluate_model

__all__ = [
    "PADL", "ConfigError", "Detection", "ModelConfig",
    "NumericalError", "TrainConfig", "Trainer",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "DegradationSpec", "ManipulationSpec", "ToyDataset", "degrade", "make_toy_images", "toy_manipulate",
    "EvalReport", "evaluate_model",
]
__version__ = "0.1.0"
