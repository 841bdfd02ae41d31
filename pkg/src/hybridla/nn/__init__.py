from .functional import (ParameterError, bilinear_sample, conv2d, layer_norm, linear, log_softmax,
                         multi_head_attention, sine_embed, sine_embed_tensor, sine_position_2d, softmax)
from .gradcheck import grad_check, grad_check_params
from .modules import MLP, Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, parameter
from .tensor import (ContractError, ShapeError, Tensor, add, backward, clamp, concat, div, exp, gelu,
                     getitem, log, matmul, maximum, mean, minimum, mul, neg, power, relu, reshape,
                     sigmoid, sin, sqrt, stack, sub, tabs, tanh, transpose, tsum, where)

__all__ = [
    "Tensor", "ShapeError", "ContractError", "ParameterError", "backward", "grad_check",
    "grad_check_params", "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "sin",
    "tanh", "sigmoid", "relu", "gelu", "tabs", "clamp", "maximum", "minimum", "tsum", "mean",
    "reshape", "transpose", "concat", "stack", "getitem", "where", "matmul", "softmax",
    "log_softmax", "layer_norm", "bilinear_sample", "linear", "conv2d", "multi_head_attention", "sine_position_2d",
    "sine_embed", "sine_embed_tensor", "Module", "Linear", "LayerNorm", "Conv2d", "MLP",
    "MultiHeadAttention", "parameter",
]
