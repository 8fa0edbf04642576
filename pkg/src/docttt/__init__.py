"""Meta-auxiliary test-time training for handwritten document recognition."""

from .tensor import (
    ComputeGraph,
    NonFiniteError,
    ParamSet,
    ShapeMismatchError,
    Tensor,
    TensorError,
    eval_graph,
    grad,
)

__version__ = "0.1.0"

__all__ = [
    "ComputeGraph",
    "NonFiniteError",
    "ParamSet",
    "ShapeMismatchError",
    "Tensor",
    "TensorError",
    "eval_graph",
    "grad",
]
