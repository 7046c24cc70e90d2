"""Minimal reverse-mode autodiff engine for the EEG convolutional networks."""

from .core import Tape, Tensor, backward, flatten, matmul, reshape
from .layers import (
    BatchNormState,
    activate,
    batchnorm,
    conv2d,
    dense,
    dropout,
    pool2d,
    weighted_cross_entropy,
)
from .optim import OptimizerState, adam_step

__all__ = [
    "Tape", "Tensor", "backward", "flatten", "matmul", "reshape",
    "BatchNormState", "activate", "batchnorm", "conv2d", "dense", "dropout",
    "pool2d", "weighted_cross_entropy", "OptimizerState", "adam_step",
]
