"""Parameterised building blocks shared by the encoder and decoder."""
from __future__ import annotations

from typing import Optional

import numpy as np

from mist.autodiff import Module, Tensor, const_param, normal_param
from mist.autodiff import ops


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int = 3,
        rng: Optional[np.random.Generator] = None,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
        padding: Optional[int] = None,
    ):
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        # "same" padding for odd kernels at stride 1
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = normal_param(rng, (out_ch, in_ch // groups, k, k))
        self.bias = const_param((out_ch,), 0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None, bias: bool = True):
        self.weight = normal_param(rng, (d_out, d_in))
        self.bias = const_param((d_out,), 0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer normalization over one axis (channels of NCHW by default)."""

    def __init__(self, dim: int, axis: int = 1, eps: float = 1e-5):
        self.axis = axis
        self.eps = eps
        self.weight = const_param((dim,), 1.0)
        self.bias = const_param((dim,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, (self.axis,), self.weight, self.bias, self.eps)


class Dropout(Module):
    """Inverted dropout; draws its mask from ``self.rng`` (set by the owner)."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self.training, self.rng)


def set_dropout_rng(model: Module, rng: np.random.Generator) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.rng = rng


def attention(q: Tensor, k: Tensor, v: Tensor):
    """Scaled dot-product attention over the second-to-last axis.

    Returns ``(output, weights)``; each row of ``weights`` is a softmax.
    """
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    scores = ops.matmul(q, k.permute(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * scale
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights
