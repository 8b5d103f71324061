"""Segmentation with learnable attention skip connections, from scratch in NumPy."""

from udtransnet.tensor import (
    GraphError,
    NumericError,
    ShapeError,
    Tensor,
    grad_check,
    no_grad,
)

__all__ = [
    "Tensor",
    "grad_check",
    "no_grad",
    "ShapeError",
    "NumericError",
    "GraphError",
]

__version__ = "0.1.0"
