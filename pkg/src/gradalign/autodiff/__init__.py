"""Reverse-mode automatic differentiation with higher-order support."""

from . import ops
from .ops import hessian_vector_product, forward_op
from .tensor import (
    AutodiffError,
    GradientResult,
    HigherOrderError,
    NotOnTapeError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    enable_grad,
    grad,
    is_grad_enabled,
    no_grad,
    set_grad_enabled,
)


def grad_of_grad(scalar_of_grads, wrt, create_graph=False):
    """Gradient of an expression that contains input-gradients.

    Identical to :func:`backward` but fails loudly when the inner gradients
    were produced without ``create_graph=True``.
    """
    return backward(scalar_of_grads, wrt, create_graph=create_graph)


__all__ = [
    "ops",
    "AutodiffError",
    "GradientResult",
    "HigherOrderError",
    "NotOnTapeError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "enable_grad",
    "forward_op",
    "grad",
    "grad_of_grad",
    "hessian_vector_product",
    "is_grad_enabled",
    "no_grad",
    "set_grad_enabled",
]
