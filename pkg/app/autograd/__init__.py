from .functional import (
    add,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    embedding,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)
from .nn import Conv2d, Dropout, Embedding, LayerNorm, Linear, Module, ModuleList, Parameter
from .optim import AdamW, AdamWState, adamw_step
from .tensor import GradientError, NonFiniteError, ShapeError, Tape, Tensor, default_dtype, no_grad, precision

__all__ = [
    "AdamW",
    "AdamWState",
    "Conv2d",
    "Dropout",
    "Embedding",
    "GradientError",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "adamw_step",
    "add",
    "concat",
    "conv2d",
    "cross_entropy",
    "default_dtype",
    "dropout",
    "embedding",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "reshape",
    "softmax",
    "transpose",
]
