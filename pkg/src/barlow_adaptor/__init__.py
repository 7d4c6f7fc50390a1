"""Unsupervised domain adaptation with cross-domain Barlow feature alignment and CORAL, in numpy."""

from .config import ConfigError, RunConfig
from .data import LabeledDataset, ShiftConfig, UnlabeledDataset, generate_synthetic_shift, load_dataset
from .experiment import ModelConfig, run_ablation
from .losses import LossWeights, bfal_forward, coral_forward, cross_entropy_forward
from .metrics import macro_accuracy, micro_accuracy, predict
from .model import init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, Variant, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "LabeledDataset", "ShiftConfig", "UnlabeledDataset", "generate_synthetic_shift",
    "load_dataset", "ModelConfig", "run_ablation", "LossWeights", "bfal_forward", "coral_forward",
    "cross_entropy_forward", "macro_accuracy", "micro_accuracy", "predict", "init_params", "load_checkpoint",
    "save_checkpoint", "TrainConfig", "Variant", "train",
]
