from . import tensor as ops
from .params import Adam, ParamBlock
from .rng import RngStream, make_rng
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    detach,
    elementwise,
    gradients,
    leaky_relu,
    log_softmax,
    matmul,
    relu,
    sigmoid,
    softmax,
)

__all__ = [
    "Adam", "ParamBlock", "RngStream", "ShapeError", "Tensor", "as_tensor",
    "backward", "concat", "detach", "elementwise", "gradients", "leaky_relu",
    "log_softmax", "make_rng", "matmul", "ops", "relu", "sigmoid", "softmax",
]
