"""Semantic IDs co-trained with debiased collaborative-filtering representations."""

from .numerics import CollapseError, NondeterminismError, NonFiniteError, ShapeError
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint
from .synthdata import SynthConfig, generate

__all__ = [
    "CollapseError",
    "NonFiniteError",
    "NondeterminismError",
    "ShapeError",
    "SynthConfig",
    "TrainConfig",
    "fit",
    "generate",
    "load_checkpoint",
    "save_checkpoint",
]
