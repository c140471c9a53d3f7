"""High-resolution semantic segmentation with trainable pyramid resizers."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
