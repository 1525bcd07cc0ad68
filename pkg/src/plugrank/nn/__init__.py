"""Minimal dense-tensor engine with reverse-mode autodiff and neural layers."""

from .tensor import (
    affine,
    layer_norm,
    Tensor,
    add,
    clip,
    concat,
    cross_entropy_logits,
    default_dtype,
    div,
    exp,
    gather_rows,
    grad_enabled,
    log,
    logsumexp,
    matmul,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
    use_dtype,
)
from .layers import (
    EncoderConfig,
    EncoderLayer,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    MLP,
    MultiHeadAttention,
    Parameter,
    ParamSet,
    TransformerEncoder,
    const_param,
    gaussian_param,
    masked_mean,
    param_rng,
)
from .optim import Adam, linear_lr
from .gradcheck import bind_params, grad_check, grad_check_params, pack_params

__all__ = [
    "Adam",
    "EncoderConfig",
    "EncoderLayer",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "MLP",
    "MultiHeadAttention",
    "Parameter",
    "ParamSet",
    "Tensor",
    "TransformerEncoder",
    "add",
    "affine",
    "bind_params",
    "clip",
    "concat",
    "const_param",
    "cross_entropy_logits",
    "default_dtype",
    "div",
    "exp",
    "gather_rows",
    "gaussian_param",
    "grad_check",
    "grad_check_params",
    "grad_enabled",
    "layer_norm",
    "linear_lr",
    "log",
    "logsumexp",
    "masked_mean",
    "matmul",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "pack_params",
    "param_rng",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sqrt",
    "sub",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
    "use_dtype",
]
