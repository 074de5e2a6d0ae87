from . import ops
from .functional import (bilinear_resize, conv2d, cross_entropy, gelu, layer_norm, linear,
                         softmax)
from .gradcheck import grad_check, grad_check_params, numerical_grad, relative_error
from .ops import concat, flip, matmul, reshape, take, transpose
from .tensor import GradTape, GraphError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "GradTape", "GraphError", "Tensor", "as_tensor", "backward", "bilinear_resize", "concat",
    "conv2d", "cross_entropy", "flip", "gelu", "grad_check", "grad_check_params", "grad_enabled",
    "layer_norm", "linear", "matmul", "no_grad", "numerical_grad", "ops", "relative_error",
    "reshape", "softmax", "take", "transpose",
]
