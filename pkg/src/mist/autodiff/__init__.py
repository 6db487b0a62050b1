"""Minimal float64 tensor engine with reverse-mode differentiation."""
from mist.autodiff.gradcheck import grad_check
from mist.autodiff.module import Module, Parameter, ParamStore, const_param, normal_param
from mist.autodiff.ops import (
    adaptive_avg_pool,
    avg_pool2,
    bilinear_resize,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    one_hot,
    softmax,
    split,
)
from mist.autodiff.serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from mist.autodiff.tensor import (
    ShapeError,
    Tensor,
    add,
    div,
    elementwise,
    exp,
    log,
    mul,
    no_grad,
    permute,
    reduce,
    relu,
    reshape,
    shape_only,
    sigmoid,
    sub,
)

__all__ = [name for name in dir() if not name.startswith("_")]
