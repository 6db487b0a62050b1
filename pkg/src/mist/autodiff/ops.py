"""Network operators with hand-written vector-Jacobian products."""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mist.autodiff import tensor as T
from mist.autodiff.tensor import ShapeError, Tensor, as_tensor, make_result, shape_result, unbroadcast


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got rank {x.ndim}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects a square [Cout, Cin/groups, k, k] kernel, got {w.shape}")
    N, Cin, H, W = x.shape
    Cout, Cg, k, _ = w.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise ShapeError(f"conv2d: channels Cin={Cin} / Cout={Cout} not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ShapeError(f"conv2d: kernel input channels {Cg} != Cin/groups = {Cin // groups}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride and dilation must be >= 1, padding >= 0")
    if b is not None and b.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({Cout},)")
    Ho = conv_output_size(H, k, stride, padding, dilation)
    Wo = conv_output_size(W, k, stride, padding, dilation)
    if Ho < 1:
        raise ShapeError(f"conv2d: non-positive output height {Ho} (H={H}, k={k}, dilation={dilation})")
    if Wo < 1:
        raise ShapeError(f"conv2d: non-positive output width {Wo} (W={W}, k={k}, dilation={dilation})")
    if T.is_shape_only():
        return shape_result((N, Cout, Ho, Wo))

    p, d, s = padding, dilation, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    span = d * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s, ::d, ::d]  # N,Cin,Ho,Wo,k,k

    G = groups
    if G == 1:
        out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        win_g = win.reshape(N, G, Cg, Ho, Wo, k, k)
        w_g = w.data.reshape(G, Cout // G, Cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", win_g, w_g).reshape(N, Cout, Ho, Wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if G == 1:
            if w.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gwin = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        else:
            gg = g.reshape(N, G, Cout // G, Ho, Wo)
            if w.requires_grad:
                gw = np.einsum("ngohw,ngchwij->gocij", gg, win_g).reshape(w.shape)
            if x.requires_grad:
                gwin = np.einsum("ngohw,gocij->ngchwij", gg, w_g).reshape(N, Cin, Ho, Wo, k, k)
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i * d : i * d + (Ho - 1) * s + 1 : s, j * d : j * d + (Wo - 1) * s + 1 : s] += gwin[
                        ..., i, j
                    ]
            gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "conv2d")


def layer_norm(x: Tensor, axes, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over ``axes`` then apply the affine ``gamma``/``beta``.

    ``gamma`` and ``beta`` have the shape of the normalized extent and are
    broadcast along every other axis.
    """
    axes = T._norm_axes(axes, x.ndim)
    extent = tuple(x.shape[a] for a in axes)
    if not axes or math.prod(extent) == 0:
        raise ShapeError("layer_norm: empty normalization group")
    if gamma.shape != extent or beta.shape != extent:
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match extent {extent}")
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    if T.is_shape_only():
        return shape_result(x.shape)

    bshape = tuple(s if i in axes else 1 for i, s in enumerate(x.shape))
    g_b = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_b + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i not in axes)

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=other).reshape(extent) if other else (g * xhat).reshape(extent)
        if beta.requires_grad:
            gb = g.sum(axis=other).reshape(extent) if other else g.reshape(extent)
        if x.requires_grad:
            gxh = g * g_b
            gx = inv * (
                gxh - gxh.mean(axis=axes, keepdims=True) - xhat * (gxh * xhat).mean(axis=axes, keepdims=True)
            )
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    if T.is_shape_only():
        return shape_result(x.shape)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    if T.is_shape_only():
        return shape_result(x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def interpolation_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row i holds the linear weights of output sample i (half-pixel centers, clamped)."""
    A = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        A[i, i0] += 1.0 - lam
        A[i, i1] += lam
    return A


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got rank {x.ndim}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid output size {out_h}x{out_w}")
    N, C, H, W = x.shape
    if T.is_shape_only():
        return shape_result((N, C, out_h, out_w))
    if (out_h, out_w) == (H, W):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    Ah = interpolation_matrix(out_h, H)
    Aw = interpolation_matrix(out_w, W)
    out = Ah @ x.data @ Aw.T

    def backward(g):
        return (Ah.T @ g @ Aw,)

    return make_result(out, (x,), backward, "bilinear_resize")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0]
    axis = _check_axis(ref, axis)
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    shape = tuple(sum(sizes) if i == axis else s for i, s in enumerate(ref.shape))
    if T.is_shape_only():
        return shape_result(shape)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    axis = _check_axis(x, axis)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        index = tuple(slice(start, start + n) if i == axis else slice(None) for i in range(x.ndim))
        out.append(T.getitem(x, index))
        start += n
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ w.T + b``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    shape = x.shape[:-1] + (w.shape[0],)
    if T.is_shape_only():
        return shape_result(shape)
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1]) if w.requires_grad else None
        gb = g.reshape(-1, w.shape[0]).sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "linear")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    lead = T.broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    if T.is_shape_only():
        return shape_result(lead + (a.shape[-2], b.shape[-1]))

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global spatial mean: [N,C,H,W] -> [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects NCHW input, got rank {x.ndim}")
    return T.reduce(x, "mean", (2, 3), keep=True)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 average pooling."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {H}x{W}")
    return T.reduce(T.reshape(x, (N, C, H // 2, 2, W // 2, 2)), "mean", (3, 5))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0 or T.is_shape_only():
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def cross_entropy(logits: Tensor, target: np.ndarray, axis: int = 1) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under ``softmax(logits)``."""
    onehot = one_hot(target, logits.shape[axis], axis)
    nll = T.neg(T.reduce(T.mul(log_softmax(logits, axis), onehot), "sum", axis))
    return T.reduce(nll, "mean")


def one_hot(target: np.ndarray, n_classes: int, axis: int = 1) -> np.ndarray:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    eye = np.eye(n_classes)[target]
    return np.moveaxis(eye, -1, axis)
