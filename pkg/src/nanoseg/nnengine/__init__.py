"""Minimal dense-tensor neural-network engine.

Tensors are plain 4D numpy arrays (batch, channels, height, width) in double
precision. There is no autograd graph: every layer implements an explicit
forward/backward pair, and architectures wire the call sequences by hand.
"""
from .layers import (
    Layer,
    Sequential,
    Conv2d,
    BatchNorm2d,
    ReLU,
    LeakyReLU,
    MaxPool2,
    Upsample2,
    concat_channels,
    split_channels_grad,
    softmax_channels,
    set_finite_checks,
)
from .loss import cross_entropy_loss
from .optim import Adam
from .checkpoint import save_tensors, load_tensors, CheckpointFormatError

__all__ = [
    "Layer",
    "Sequential",
    "Conv2d",
    "BatchNorm2d",
    "ReLU",
    "LeakyReLU",
    "MaxPool2",
    "Upsample2",
    "concat_channels",
    "split_channels_grad",
    "softmax_channels",
    "set_finite_checks",
    "cross_entropy_loss",
    "Adam",
    "save_tensors",
    "load_tensors",
    "CheckpointFormatError",
]
