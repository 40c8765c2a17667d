"""Minimal dense reverse-mode autodiff with AdamW and a checkpoint format."""
from .tensor import (Tensor, ShapeError, NonFiniteError, backward, no_grad, grad_enabled, as_tensor,
                     add, sub, mul, div, where, power, exp, log, sqrt, tanh, relu, sigmoid, softplus,
                     cos, sin, tan, huber, tsum, mean, reshape, transpose, swapaxes, getitem, concat,
                     stack, cumsum, matmul, softmax, log_softmax, squared_difference)
from .optim import ParamStore, adamw_step
from .gradcheck import grad_check, GradCheckReport
from .checkpoint import save_checkpoint, load_checkpoint, read_checkpoint, CheckpointError

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "backward", "no_grad", "grad_enabled", "as_tensor",
    "add", "sub", "mul", "div", "where", "power", "exp", "log", "sqrt", "tanh", "relu", "sigmoid",
    "softplus", "cos", "sin", "tan", "huber", "tsum", "mean", "reshape", "transpose", "swapaxes",
    "getitem", "concat", "stack", "cumsum", "matmul", "softmax", "log_softmax", "squared_difference",
    "ParamStore", "adamw_step", "grad_check", "GradCheckReport", "save_checkpoint", "load_checkpoint",
    "read_checkpoint", "CheckpointError",
]
