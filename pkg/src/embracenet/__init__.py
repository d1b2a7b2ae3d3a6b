"""Multimodal activity recognition with EmbraceNet-style stochastic fusion."""

from .data import Dataset, SensorSample, SynthConfig, generate_synthetic, load_dataset
from .inference import EnsembleConfig, evaluate, self_ensemble_predict
from .model import Model, ModelConfig, build, load_checkpoint, predict, save_checkpoint
from .train import TrainConfig, learning_rate, train_run

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SensorSample",
    "SynthConfig",
    "generate_synthetic",
    "load_dataset",
    "EnsembleConfig",
    "evaluate",
    "self_ensemble_predict",
    "Model",
    "ModelConfig",
    "build",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "TrainConfig",
    "learning_rate",
    "train_run",
]
