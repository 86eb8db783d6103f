"""Compact vision-transformer lab: preprocessing, training, explanation, metrics."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check, no_grad  # noqa: F401
from .model import ViTConfig, VisionTransformer, parameter_count  # noqa: F401
