"""Minimal trainable-network substrate: blocks with manual backprop, Adam,
seeded randomness, and the binary checkpoint container."""

from .rngs import derive_seed, make_rng, sample_standard_normal
from .blocks import (
    ParamBlock,
    ShapeError,
    BackwardStateError,
    Affine,
    Conv2d,
    SiLU,
    Flatten,
    EmbeddingLookup,
    Identity,
    Model,
    Upsample2,
)
from .adam import Adam, NonFiniteGradientError
from .losses import mse_loss, softmax, softmax_cross_entropy
from .checkpoint import save_checkpoint, load_checkpoint, assign_params, CheckpointError

__all__ = [
    "derive_seed",
    "make_rng",
    "sample_standard_normal",
    "ParamBlock",
    "ShapeError",
    "BackwardStateError",
    "Affine",
    "Conv2d",
    "SiLU",
    "Flatten",
    "EmbeddingLookup",
    "Identity",
    "Model",
    "Upsample2",
    "Adam",
    "NonFiniteGradientError",
    "mse_loss",
    "softmax",
    "softmax_cross_entropy",
    "save_checkpoint",
    "load_checkpoint",
    "assign_params",
    "CheckpointError",
]
