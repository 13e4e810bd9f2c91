"""Small reverse-mode autodiff engine and CNN layers on numpy."""

from . import ops
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvBlock,
    GroupNorm,
    Head,
    Linear,
    Module,
    NormMode,
    Sequential,
)
from .optim import SGD, sgd_step
from .tensor import GradientMap, Tape, Tensor, as_tensor, backward, grad

__all__ = [
    "ops", "BatchNorm2d", "Conv2d", "ConvBlock", "GroupNorm", "Head", "Linear", "Module",
    "NormMode", "Sequential", "SGD", "sgd_step", "GradientMap", "Tape", "Tensor", "as_tensor",
    "backward", "grad",
]
