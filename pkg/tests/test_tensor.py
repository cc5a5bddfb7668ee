import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coma import tensor as T
from coma.errors import ConfigError, FormatError, NumericalError, UsageError
from coma.serialize import MAGIC, load_tensor, read_tensor, save_tensor, tensor_bytes, write_tensor
from coma.tensor import Graph, Tensor, backward, no_grad

from oracles import conv2d_loops


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---- conv2d


def test_conv_sum_example():
    x = Tensor(np.array([[[[1.0, 2], [3, 4]]]]))
    y = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), 2, 0)
    assert y.data.tolist() == [[[[10.0]]]]


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 0)
    np.testing.assert_array_equal(y.data, x)


def test_conv_quarter_average():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 2, 2), 0.25)), Tensor(np.zeros(1)), 2, 0)
    np.testing.assert_allclose(y.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


@pytest.mark.parametrize("k,s,q,size", [(3, 1, 1, 5), (2, 2, 0, 6), (3, 2, 1, 7), (1, 1, 0, 3), (4, 4, 0, 8)])
def test_conv_matches_loops_and_direct(rng, k, s, q, size):
    x = rng.standard_normal((2, 3, size, size))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    ref = conv2d_loops(x, w, b, s, q)
    for method in ("im2col", "direct"):
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), s, q, method=method)
        np.testing.assert_allclose(y.data, ref, rtol=0, atol=1e-10)


def test_conv_asymmetric_padding_matches_floor_convention(rng):
    # 7x7 stride 4 with pads (3, 0) equals symmetric pad 3 with the trailing partial window dropped
    x = rng.standard_normal((1, 2, 16, 16))
    w = rng.standard_normal((3, 2, 7, 7))
    y = T.conv2d(Tensor(x), Tensor(w), None, 4, (3, 0))
    ref = conv2d_loops(x, w, None, 4, 3, 0)
    assert y.shape == (1, 3, 4, 4)
    np.testing.assert_allclose(y.data, ref, atol=1e-10)


def test_conv_rejects_ragged_stride():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), None, 2, 0)
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))), None, 2, 0)


def test_conv_backward_paths_agree(rng):
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((2, 3, 3, 3))
    grads = []
    for method in ("im2col", "direct"):
        xt, wt, bt = leaf(x), leaf(w), leaf(np.zeros(3))
        (T.conv2d(xt, wt, bt, 2, 0, method=method) * g).sum().backward()
        grads.append((xt.grad, wt.grad, bt.grad))
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-10)


# ---- maxpool


def test_maxpool_examples():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert T.maxpool2d(Tensor(x)).data[0, 0].tolist() == [[5, 7], [13, 15]]
    c = np.full((2, 3, 4, 4), 1.5)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(c)).data, np.full((2, 3, 2, 2), 1.5))


def test_maxpool_tie_goes_to_first():
    x = leaf(np.ones((1, 1, 2, 2)))
    T.maxpool2d(x).sum().backward()
    assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]


def test_maxpool_odd_extent():
    with pytest.raises(ConfigError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


# ---- softmax / layer norm / gelu


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros((1, 5)))).data, np.full((1, 5), 0.2))
    np.testing.assert_allclose(T.softmax(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75], atol=1e-15)


def test_softmax_nan():
    with pytest.raises(NumericalError):
        T.softmax(Tensor(np.array([0.0, np.nan])))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_softmax_rows_sum_to_one(xs):
    s = T.softmax(Tensor(np.array(xs))).data
    assert abs(s.sum() - 1) < 1e-6
    assert np.all(s >= 0)


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    y = T.layer_norm(Tensor(np.array([[1.0, 2, 3]])), ones, zeros, 0.0)
    np.testing.assert_allclose(y.data, [[-1.224744871, 0, 1.224744871]], atol=1e-9)
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((2, 3), 7.0)), ones, zeros, 1e-6).data, 0)
    beta = Tensor(np.array([0.1, -2, 3]))
    y = T.layer_norm(Tensor(np.random.default_rng(0).standard_normal((4, 3))), zeros, beta, 1e-6)
    np.testing.assert_array_equal(y.data, np.broadcast_to(beta.data, (4, 3)))


def test_gelu_values():
    y = T.gelu(Tensor(np.array([0.0, 1.0, 30.0]))).data
    assert y[0] == 0
    assert abs(y[1] - 0.841344746) < 1e-6
    assert abs(y[2] - 30.0) < 1e-9


# ---- plumbing ops


def test_matmul_identity_and_gradient(rng):
    X = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(X), Tensor(np.eye(4))).data, X)
    A, B = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    G = rng.standard_normal((3, 2))
    (T.matmul(A, B) * G).sum().backward()
    np.testing.assert_allclose(A.grad, G @ B.data.T, atol=1e-12)
    np.testing.assert_allclose(B.grad, A.data.T @ G, atol=1e-12)


def test_batched_matmul_weight_grad_sums_batch(rng):
    X, W = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((4, 5)))
    (X @ W).sum().backward()
    np.testing.assert_allclose(W.grad, X.data.sum(axis=(0, 1))[:, None] * np.ones(5), atol=1e-12)


def test_gather_scatter_roundtrip(rng):
    X = rng.standard_normal((6, 3))
    tmpl = rng.standard_normal((6, 3))
    idx = np.array([4, 0, 2])
    out = T.scatter_rows(T.gather_rows(Tensor(X), idx), idx, Tensor(tmpl)).data
    np.testing.assert_array_equal(out[idx], X[idx])
    rest = np.setdiff1d(np.arange(6), idx)
    np.testing.assert_array_equal(out[rest], tmpl[rest])


def test_gather_out_of_range():
    with pytest.raises(ConfigError):
        T.gather_rows(Tensor(np.zeros((3, 2))), np.array([3]))
    with pytest.raises(ConfigError):
        T.gather_rows(Tensor(np.zeros((3, 2))), np.array([-1]))


def test_scatter_duplicate_indices():
    with pytest.raises(ConfigError):
        T.scatter_rows(Tensor(np.zeros((2, 2))), np.array([1, 1]), Tensor(np.zeros((3, 2))))


def test_broadcast_add_unbroadcasts_grad(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal(4))
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))


# ---- backward / graph


def test_backward_basic():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == 6.0
    X = leaf(np.arange(6.0).reshape(2, 3))
    X.sum().backward()
    np.testing.assert_array_equal(X.grad, np.ones((2, 3)))


def test_backward_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(UsageError):
        backward(x * 2)


def test_gradient_shape_and_dtype():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.shape == (2, 3) and x.grad.dtype == np.float32


def test_graph_is_topological_and_no_grad_records_nothing(rng):
    x = leaf(rng.standard_normal((2, 3)))
    with Graph(retain=True) as g:
        y = T.gelu(x @ Tensor(rng.standard_normal((3, 3)))).sum()
    assert g.n_records > 0
    idx = [r.index for r in g.records]
    assert idx == sorted(idx)
    for r in g.records:
        for inp in r.inputs:
            if inp._record is not None:
                assert inp._record.index < r.index
    with no_grad(), Graph() as g2:
        T.gelu(x @ x.transpose(1, 0)).sum()
    assert g2.n_records == 0
    y.backward()
    assert x.grad is not None


def test_forward_is_bit_reproducible(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


# ---- CMT1 files


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_roundtrip(tmp_path, rng, dtype):
    a = rng.standard_normal((2, 3, 4)).astype(dtype)
    save_tensor(tmp_path / "a.cmt", a)
    b = load_tensor(tmp_path / "a.cmt")
    assert b.dtype == dtype and b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_tensor_layout():
    raw = tensor_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 0
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 1 and int.from_bytes(raw[20:28], "little") == 2
    assert np.frombuffer(raw[28:], "<f4").tolist() == [1.0, 2.0]


def test_tensor_corrupt():
    raw = tensor_bytes(np.zeros(3))
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(raw[:-1]))
    buf = io.BytesIO()
    write_tensor(buf, np.zeros(3))
    assert buf.getvalue() == raw
