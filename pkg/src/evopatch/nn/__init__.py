"""Minimal NHWC convolutional network with hand-written backprop."""

from .layers import Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU, ShapeError, Softmax
from .model import CompactCnn, build_default, build_proxy, default_parameter_count, parameter_count
from .train import AdamState, TrainConfig, TrainingDiverged, TrainResult, adam_step, grad_check, train

__all__ = [
    "AdamState",
    "CompactCnn",
    "Conv2D",
    "Dense",
    "Dropout",
    "Flatten",
    "MaxPool2D",
    "ReLU",
    "ShapeError",
    "Softmax",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "adam_step",
    "build_default",
    "build_proxy",
    "default_parameter_count",
    "grad_check",
    "parameter_count",
    "train",
]
