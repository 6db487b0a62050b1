import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mist.autodiff import (
    ParamStore,
    ShapeError,
    Tensor,
    adaptive_avg_pool,
    avg_pool2,
    bilinear_resize,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    elementwise,
    exp,
    grad_check,
    layer_norm,
    linear,
    load_tensor,
    log,
    log_softmax,
    matmul,
    no_grad,
    reduce,
    save_tensor,
    shape_only,
    softmax,
    split,
    tensor_from_bytes,
    tensor_to_bytes,
)
from mist.autodiff.ops import interpolation_matrix
from mist.autodiff.serialize import FormatError

from helpers import naive_conv, rand


# -- backward -------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = Tensor(rand(3, 4), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_sum_of_squares_is_2x():
    x = Tensor(rand(5), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_fan_out_accumulates():
    y = Tensor(rand(2, 3), requires_grad=True)
    (y + y).sum().backward()
    assert np.array_equal(y.grad, np.full((2, 3), 2.0))


def test_non_scalar_loss_rejected():
    x = Tensor(rand(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(rand(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert y.node is None and not y.requires_grad


def test_diamond_graph_accumulates_once_per_path():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    a = x * 3.0
    b = a.sigmoid()
    c = a * b
    c.sum().backward()
    s = 1 / (1 + np.exp(-3 * x.data))
    expected = 3 * s + 3 * x.data * 3 * s * (1 - s)
    assert np.allclose(x.grad, expected, atol=1e-14)


# -- elementwise and reductions --------------------------------------------

def test_relu_and_sigmoid_examples():
    assert np.array_equal(elementwise(Tensor(np.array([-1.0, 0.0, 2.0])), "relu").data, [0, 0, 2])
    assert elementwise(Tensor(np.array(0.0)), "sigmoid").item() == 0.5


def test_mask_broadcast_identity():
    x = rand(2, 3, 4, 4)
    ones = np.ones((2, 1, 4, 4))
    assert np.array_equal(elementwise(Tensor(x), "mul", Tensor(ones)).data, x)


def test_non_broadcastable_rejected():
    with pytest.raises(ShapeError):
        elementwise(Tensor(rand(2, 3)), "add", Tensor(rand(2, 4)))


def test_broadcast_gradient_reduces_over_broadcast_axes():
    x = Tensor(rand(2, 3, 4, 4), requires_grad=True)
    m = Tensor(rand(2, 1, 4, 4, seed=1), requires_grad=True)
    (x * m).sum().backward()
    assert m.grad.shape == (2, 1, 4, 4)
    assert np.allclose(m.grad, x.data.sum(axis=1, keepdims=True), atol=1e-13)


def test_reduce_examples():
    assert np.all(reduce(Tensor(np.full((3, 5), 2.5)), "mean", 1).data == 2.5)
    assert reduce(Tensor(np.array([1.0, 5.0, 3.0])), "max", 0).item() == 5.0
    x = Tensor(rand(4), requires_grad=True)
    reduce(x, "mean", 0).backward()
    assert np.array_equal(x.grad, np.full(4, 0.25))


def test_max_gradient_goes_to_first_argmax_on_ties():
    x = Tensor(np.array([[1.0, 7.0, 7.0, 2.0]]), requires_grad=True)
    reduce(x, "max", 1).sum().backward()
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


# -- concat / split / linear / pooling -------------------------------------

def test_concat_shape_and_round_trip():
    a, b = Tensor(rand(2, 3)), Tensor(rand(2, 5, seed=1))
    c = concat([a, b], axis=1)
    assert c.shape == (2, 8)
    p, q = split(c, [3, 5], axis=1)
    assert np.array_equal(p.data, a.data) and np.array_equal(q.data, b.data)


def test_concat_rejects_empty_and_mismatch():
    with pytest.raises(ShapeError):
        concat([], axis=0)
    with pytest.raises(ShapeError):
        concat([Tensor(rand(2, 3)), Tensor(rand(3, 3))], axis=1)


def test_linear_examples():
    x = rand(4, 3)
    assert np.array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([0.0])))
    assert np.array_equal(out.data, [3.0])
    with pytest.raises(ShapeError):
        linear(Tensor(rand(2, 3)), Tensor(rand(4, 5)))


def test_linear_matches_dot_product_oracle():
    x, w, b = rand(3, 5), rand(4, 5, seed=1), rand(4, seed=2)
    out = linear(Tensor(x), Tensor(w), Tensor(b)).data
    oracle = np.array([[sum(x[i, k] * w[j, k] for k in range(5)) + b[j] for j in range(4)] for i in range(3)])
    assert np.max(np.abs(out - oracle)) < 1e-12


def test_matmul_batched_oracle():
    a, b = rand(2, 3, 4), rand(4, 5, seed=1)
    out = matmul(Tensor(a), Tensor(b)).data
    oracle = np.array([[[sum(a[n, i, k] * b[k, j] for k in range(4)) for j in range(5)] for i in range(3)] for n in range(2)])
    assert np.max(np.abs(out - oracle)) < 1e-12


def test_adaptive_avg_pool_examples():
    assert np.all(adaptive_avg_pool(Tensor(np.full((1, 2, 3, 3), 4.0))).data == 4.0)
    assert adaptive_avg_pool(Tensor(np.array([[[[0.0, 2.0], [4.0, 6.0]]]]))).item() == 3.0
    x = Tensor(rand(1, 1, 3, 5), requires_grad=True)
    adaptive_avg_pool(x).sum().backward()
    assert np.allclose(x.grad, 1 / 15, rtol=0, atol=1e-16)


def test_avg_pool2():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(avg_pool2(Tensor(x)).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


# -- dropout ---------------------------------------------------------------

def test_dropout_identities_and_determinism():
    x = Tensor(rand(4, 8))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.7, False, rng) is x
    a = dropout(x, 0.3, True, np.random.default_rng(5)).data
    b = dropout(x, 0.3, True, np.random.default_rng(5)).data
    assert np.array_equal(a, b)
    kept = a != 0
    assert np.allclose(a[kept], x.data[kept] / 0.7, rtol=0, atol=1e-15)


def test_dropout_rejects_p_ge_1():
    with pytest.raises(ValueError):
        dropout(Tensor(rand(3)), 1.0, True, np.random.default_rng(0))


def test_dropout_gradient_uses_recorded_mask():
    x = Tensor(rand(50), requires_grad=True)
    y = dropout(x, 0.5, True, np.random.default_rng(1))
    y.sum().backward()
    assert np.array_equal(x.grad, (y.data != 0) * 2.0)


# -- convolution -----------------------------------------------------------

def test_conv_identity_kernel():
    x = rand(1, 1, 5, 6)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv_channel_sum():
    x = rand(1, 2, 4, 4)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 2, 1, 1)))).data
    assert np.array_equal(out[0, 0], x[0, 0] + x[0, 1])


def test_conv_dilated_matches_naive_oracle():
    x, w = rand(1, 1, 6, 6), rand(1, 1, 3, 3, seed=1)
    out = conv2d(Tensor(x), Tensor(w), padding=2, dilation=2).data
    assert np.max(np.abs(out - naive_conv(x, w, padding=2, dilation=2))) < 1e-12


@pytest.mark.parametrize(
    "cin,cout,k,stride,pad,dil,groups",
    [(3, 4, 3, 1, 1, 1, 1), (4, 6, 3, 2, 1, 1, 2), (2, 2, 1, 1, 0, 1, 1), (3, 2, 3, 1, 3, 3, 1), (4, 4, 3, 2, 1, 1, 4)],
)
def test_conv_matches_naive_oracle(cin, cout, k, stride, pad, dil, groups):
    x, w, b = rand(2, cin, 7, 6), rand(cout, cin // groups, k, k, seed=1), rand(cout, seed=2)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil, groups).data
    assert np.max(np.abs(out - naive_conv(x, w, b, stride, pad, dil, groups))) < 1e-12


def test_depthwise_equals_per_channel_convolution():
    x, w = rand(2, 3, 6, 6), rand(3, 1, 3, 3, seed=1)
    dw = conv2d(Tensor(x), Tensor(w), padding=1, groups=3).data
    for c in range(3):
        single = conv2d(Tensor(x[:, c : c + 1]), Tensor(w[c : c + 1]), padding=1).data
        assert np.max(np.abs(dw[:, c : c + 1] - single)) < 1e-12


def test_conv_rejects_bad_shapes():
    with pytest.raises(ShapeError, match="groups"):
        conv2d(Tensor(rand(1, 3, 4, 4)), Tensor(rand(4, 1, 3, 3)), groups=2)
    with pytest.raises(ShapeError, match="height"):
        conv2d(Tensor(rand(1, 1, 2, 8)), Tensor(rand(1, 1, 3, 3)), dilation=2)


# -- normalization, softmax, resize ----------------------------------------

def _ln(x, axes, eps=1e-5):
    extent = tuple(x.shape[a] for a in axes)
    return layer_norm(Tensor(x), axes, Tensor(np.ones(extent)), Tensor(np.zeros(extent)), eps)


def test_layer_norm_examples():
    assert np.array_equal(_ln(np.full((2, 4), 3.0), (1,)).data, np.zeros((2, 4)))
    assert np.array_equal(_ln(np.array([[1.0, 3.0]]), (1,), eps=0.0).data, [[-1.0, 1.0]])
    x = rand(2, 4)
    out = _ln(x, (1,)).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    v = x.var(axis=1)
    assert np.max(np.abs(out.var(axis=1) - v / (v + 1e-5))) < 1e-6
    out = _ln(rand(2, 4), (1,), eps=0.0).data
    assert np.max(np.abs(out.var(axis=1) - 1)) < 1e-6


def test_softmax_examples():
    assert np.array_equal(softmax(Tensor(np.zeros(4)), 0).data, np.full(4, 0.25))
    x = rand(3, 5)
    assert np.max(np.abs(softmax(Tensor(x + 17.3), 1).data - softmax(Tensor(x), 1).data)) < 1e-12
    p = softmax(Tensor(np.array([0.0, math.log(3.0)])), 0).data
    assert np.max(np.abs(p - [0.25, 0.75])) < 1e-15


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    p = softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-9
    assert np.all(np.isfinite(log_softmax(Tensor(x), axis=1).data))


def test_bilinear_identity_and_constant():
    x = rand(1, 2, 5, 3)
    assert np.array_equal(bilinear_resize(Tensor(x), 5, 3).data, x)
    c = bilinear_resize(Tensor(np.full((1, 1, 3, 3), 0.7)), 7, 5).data
    assert np.allclose(c, 0.7, rtol=0, atol=1e-15)


def _bilinear_oracle(img, oh, ow):
    H, W = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = min(max((i + 0.5) * H / oh - 0.5, 0.0), H - 1)
            sx = min(max((j + 0.5) * W / ow - 0.5, 0.0), W - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out


def test_bilinear_matches_per_pixel_oracle():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
    assert np.max(np.abs(out - _bilinear_oracle(img, 4, 4))) < 1e-12
    assert np.array_equal(out[0], [0.0, 0.25, 0.75, 1.0])
    img = rand(5, 3)
    out = bilinear_resize(Tensor(img[None, None]), 8, 7).data[0, 0]
    assert np.max(np.abs(out - _bilinear_oracle(img, 8, 7))) < 1e-12


def test_interpolation_rows_are_convex():
    A = interpolation_matrix(9, 4)
    assert np.allclose(A.sum(axis=1), 1.0) and np.all(A >= 0)


# -- gradient checks -------------------------------------------------------

def _gc(f, *shapes, seed=0, **kw):
    xs = [Tensor(rand(*s, seed=seed + i)) for i, s in enumerate(shapes)]
    return grad_check(lambda x: f(x, *xs[1:]), xs[0], wrt=xs[1:], **kw)


OPERATOR_CASES = {
    "add_broadcast": (lambda x, y: x + y, (2, 3, 4), (1, 3, 1)),
    "sub": (lambda x, y: x - y, (3, 4), (3, 4)),
    "mul_broadcast": (lambda x, y: x * y, (2, 3, 4, 4), (2, 1, 4, 4)),
    "div": (lambda x, y: x / (y * y + 1.0), (3, 4), (3, 4)),
    "relu": (lambda x: (x * 1.0).relu() * x, (4, 5)),
    "sigmoid": (lambda x: x.sigmoid(), (4, 5)),
    "exp_log": (lambda x: exp(log(x * x + 1.0) * 0.5) * x, (3, 3)),
    "sum_axis": (lambda x: x.sum(axis=1) * x.sum(axis=(0, 2), keepdims=True).sum(), (2, 3, 4)),
    "mean": (lambda x: x.mean(axis=(1, 2), keepdims=True) * x, (2, 3, 4)),
    "max": (lambda x: x.max(axis=1) * 2.0, (3, 5)),
    "reshape_permute": (lambda x: x.reshape(4, 6).permute(1, 0) * Tensor(np.arange(24.0).reshape(6, 4)), (2, 3, 4)),
    "getitem": (lambda x: x[:, 1:3] * x[:, :2], (3, 4)),
    "concat_split": (lambda x, y: split(concat([x, y], 1), [1, 6], 1)[1] * 3.0, (2, 3), (2, 4)),
    "linear": (lambda x, w, b: linear(x, w, b), (3, 5), (4, 5), (4,)),
    "matmul": (lambda a, b: matmul(a, b), (2, 3, 4), (4, 2)),
    "conv": (lambda x, w, b: conv2d(x, w, b, 1, 1), (2, 3, 5, 5), (4, 3, 3, 3), (4,)),
    "conv_strided": (lambda x, w: conv2d(x, w, None, 2, 1), (1, 2, 6, 6), (3, 2, 3, 3)),
    "conv_dilated": (lambda x, w: conv2d(x, w, None, 1, 2, 2), (1, 2, 6, 6), (2, 2, 3, 3)),
    "conv_grouped": (lambda x, w: conv2d(x, w, None, 1, 1, 1, 2), (1, 4, 5, 5), (6, 2, 3, 3)),
    "conv_depthwise": (lambda x, w: conv2d(x, w, None, 2, 1, 1, 3), (1, 3, 6, 6), (3, 1, 3, 3)),
    "layer_norm": (lambda x, g, b: layer_norm(x, (1,), g, b), (2, 4, 3, 3), (4,), (4,)),
    "layer_norm_multi": (lambda x, g, b: layer_norm(x, (1, 2), g, b), (2, 3, 4), (3, 4), (3, 4)),
    "softmax": (lambda x: softmax(x, 1) * Tensor(rand(3, 5, seed=9)), (3, 5)),
    "log_softmax": (lambda x: log_softmax(x, 0) * Tensor(rand(4, 2, seed=9)), (4, 2)),
    "bilinear_up": (lambda x: bilinear_resize(x, 7, 6) * Tensor(rand(1, 2, 7, 6, seed=9)), (1, 2, 3, 2)),
    "bilinear_down": (lambda x: bilinear_resize(x, 2, 3) * Tensor(rand(1, 1, 2, 3, seed=9)), (1, 1, 5, 7)),
    "adaptive_pool": (lambda x: adaptive_avg_pool(x) * x, (1, 2, 3, 3)),
    "avg_pool2": (lambda x: avg_pool2(x) * Tensor(rand(1, 2, 2, 3, seed=9)), (1, 2, 4, 6)),
    "cross_entropy": (lambda x: cross_entropy(x, np.array([[0, 2], [1, 1]])[None]), (1, 3, 2, 2)),
}


@pytest.mark.parametrize("name", sorted(OPERATOR_CASES))
def test_operator_gradients(name):
    f, *shapes = OPERATOR_CASES[name]
    assert _gc(f, *shapes) < 1e-4


def test_grad_check_exact_for_linear_maps():
    w = Tensor(rand(3, 3))
    err = grad_check(lambda x: linear(x, w) * 2.0 - x, Tensor(rand(2, 3, seed=1)), wrt=[w])
    assert err < 1e-10


def test_grad_check_softmax_cross_entropy():
    target = np.random.default_rng(3).integers(0, 4, size=(2, 5, 5))
    assert grad_check(lambda x: cross_entropy(x, target), Tensor(rand(2, 4, 5, 5))) < 1e-6


def test_grad_check_reports_wrong_gradient():
    from mist.autodiff.tensor import make_result

    def bad_square(x):
        return make_result(x.data**2, (x,), lambda g: (g * x.data,), "bad")  # should be 2x

    assert grad_check(bad_square, Tensor(rand(4) + 3.0)) > 0.1


# -- determinism, shape-only mode, param store -----------------------------

def test_operations_are_bit_deterministic():
    def run():
        x, w = Tensor(rand(2, 3, 8, 8), requires_grad=True), Tensor(rand(4, 3, 3, 3, seed=1), requires_grad=True)
        y = softmax(conv2d(x, w, padding=1), 1)
        y.sum().backward()
        return y.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_shape_only_mode_allocates_nothing():
    with shape_only():
        x = Tensor(np.zeros((2, 96, 64, 64)))
        y = conv2d(x, Tensor(np.zeros((192, 96, 3, 3))), None, 2, 1)
        y = bilinear_resize(y, 128, 128)
    assert y.shape == (2, 192, 128, 128)
    assert y.data.strides == (0, 0, 0, 0)


def test_param_store_order_is_lexicographic():
    store = ParamStore({"b.w": Tensor(np.ones(2)), "a.w": Tensor(np.ones(3)), "a.b": Tensor(np.ones(1))})
    assert list(store) == ["a.b", "a.w", "b.w"]
    assert store.exp_avg["a.w"].shape == (3,)
    assert store.num_parameters() == 6


# -- tensor file format ----------------------------------------------------

def test_tensor_bytes_layout():
    blob = tensor_to_bytes(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert blob[:4] == b"MIST" and blob[4] == 1 and blob[5] == 2
    assert struct.unpack("<II", blob[6:14]) == (2, 3)
    assert struct.unpack("<6d", blob[14:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert len(blob) == 4 + 1 + 1 + 8 + 48


@pytest.mark.parametrize("shape", [(), (5,), (2, 3, 4), (1, 1, 1, 1)])
def test_tensor_round_trip_bit_exact(shape, tmp_path):
    x = rand(*shape) if shape else np.array(math.pi)
    x = np.asarray(x) * 1e300 if shape == (5,) else np.asarray(x)
    back = tensor_from_bytes(tensor_to_bytes(x))
    assert back.shape == x.shape and back.tobytes() == x.tobytes()
    save_tensor(tmp_path / "t.bin", Tensor(x))
    assert load_tensor(tmp_path / "t.bin").data.tobytes() == x.tobytes()


def test_tensor_format_errors():
    good = tensor_to_bytes(rand(3))
    with pytest.raises(FormatError):
        tensor_from_bytes(b"NOPE" + good[4:])
    with pytest.raises(FormatError):
        tensor_from_bytes(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FormatError):
        tensor_from_bytes(good[:-3])
