"""Minimal dense-tensor algebra with reverse-mode automatic differentiation."""

from . import ops
from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import Conv3d, LayerNorm, Linear, Module, Parameter
from .ops import conv3d, cross_entropy_logits, gelu, layernorm, matmul, softmax
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import Tensor, default_dtype, get_default_dtype, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "clip_grad_norm",
    "Conv3d",
    "FormatError",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "check_gradients",
    "conv3d",
    "cross_entropy_logits",
    "default_dtype",
    "gelu",
    "get_default_dtype",
    "layernorm",
    "load_checkpoint",
    "matmul",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
    "save_checkpoint",
    "softmax",
]
