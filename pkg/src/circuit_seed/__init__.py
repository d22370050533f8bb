"""Gradient-informed placement of sparse trainable entries in a LoRA adapter."""

from .core_math import NumericalError, make_rng, svd
from .discovery import Circuit, GradStats, accumulate, discover, overlap, score, select_top_k
from .lora_mlp import AdaptedModel, Batch, backward, forward
from .tasks import DENSE, SPARSE, TargetSpec, make_task, relative_mse
from .training import CLEAN, NOISY, TrainConfig, train

__all__ = [
    "AdaptedModel", "Batch", "CLEAN", "Circuit", "DENSE", "GradStats", "NOISY", "NumericalError",
    "SPARSE", "TargetSpec", "TrainConfig", "accumulate", "backward", "discover", "forward",
    "make_rng", "make_task", "overlap", "relative_mse", "score", "select_top_k", "svd", "train",
]
