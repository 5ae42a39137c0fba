"""Correlated-latent VAE toolkit for zero degree calorimeter response simulation."""

from .container import Container, read_container, write_container
from .datasets import Dataset, ToyShowerConfig, load_dataset, save_dataset, split_dataset, synthesize_toy_dataset
from .evaluation import EvaluationReport, evaluate, wasserstein_1d
from .inference import GenerationRequest, WOptimizerConfig, generate, optimize_w, reconstruct, traverse
from .model import CorrVAE, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .physics import PropertySpec, center_of_mass, channel_values, total_deposit
from .training import LossWeights, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Container", "read_container", "write_container",
    "Dataset", "ToyShowerConfig", "load_dataset", "save_dataset", "split_dataset", "synthesize_toy_dataset",
    "EvaluationReport", "evaluate", "wasserstein_1d",
    "GenerationRequest", "WOptimizerConfig", "generate", "optimize_w", "reconstruct", "traverse",
    "CorrVAE", "ModelConfig", "init_model", "load_checkpoint", "save_checkpoint",
    "PropertySpec", "center_of_mass", "channel_values", "total_deposit",
    "LossWeights", "TrainConfig", "train",
]
