import io

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from narrowlab import numerics as nx
from narrowlab.numerics import Parameter, ShapeError, Tensor


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_zero_product():
    x = np.random.default_rng(0).normal(size=(2, 5))
    np.testing.assert_array_equal(nx.matmul(np.eye(2), x).data, x)
    np.testing.assert_array_equal(nx.mul(x, np.zeros_like(x)).data, np.zeros_like(x))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(nx.matmul(a, b).data, triple_loop_matmul(a, b), atol=1e-14)


def test_shape_errors_name_operation_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(3, 4\).*\(3, 2\)"):
        nx.matmul(np.ones((3, 4)), np.ones((3, 2)))
    with pytest.raises(ShapeError, match="add"):
        nx.add(np.ones((2, 3)), np.ones((4, 3)))


def test_softmax_symmetric_row():
    np.testing.assert_array_equal(nx.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    es = [mpmath.exp(v) for v in (1, 2, 3)]
    ref = [float(e / sum(es)) for e in es]
    np.testing.assert_allclose(nx.softmax_rows(np.array([[1.0, 2.0, 3.0]])).data[0], ref,
                               rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_rows_sum_and_shift(x, c):
    p = nx.softmax_rows(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax_rows(x + c).data, p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.integers(-20, 20).map(float)), st.integers(-100, 100))
def test_softmax_shift_is_bit_exact_when_shift_is_exact(x, c):
    # integer inputs and shifts survive the max subtraction without rounding
    np.testing.assert_array_equal(nx.softmax_rows(x + c).data, nx.softmax_rows(x).data)


def test_backward_linear_sum_has_outer_structure():
    rng = np.random.default_rng(2)
    W = Parameter("W", rng.normal(size=(3, 4)))
    x = rng.normal(size=(4, 1))
    nx.backward(nx.sum_(nx.matmul(W, x)), [W])
    # d/dW_ij sum_k (W x)_k = x_j for every row i
    np.testing.assert_allclose(W.grad, np.ones((3, 1)) @ x.T, atol=1e-15)


def test_backward_disconnected_and_frozen():
    W = Parameter("W", np.ones((2, 2)))
    V = Parameter("V", np.ones((2, 2)))
    frozen = Parameter("F", np.ones((2, 2)), trainable=False)
    frozen.grad[:] = 7.0
    nx.backward(nx.sum_(nx.mul(V, frozen)), [W, V, frozen])
    np.testing.assert_array_equal(W.grad, 0.0)
    np.testing.assert_array_equal(V.grad, 1.0)
    np.testing.assert_array_equal(frozen.grad, 7.0)


def test_backward_squared_norm():
    W = Parameter("W", np.random.default_rng(3).normal(size=(3, 3)))
    nx.backward(nx.sum_(nx.mul(W, W)), [W])
    np.testing.assert_allclose(W.grad, 2 * W.data)


def test_backward_rejects_non_scalar():
    W = Parameter("W", np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        nx.backward(nx.mul(W, 2.0), [W])


def test_grad_check_quadratic_and_constant():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(4, 4))
    W = Parameter("W", rng.normal(size=(4, 3)))
    f = lambda: nx.sum_(nx.mul(nx.matmul(A, W), W))
    assert nx.grad_check(f, [W], eps=1e-5) < 1e-9
    assert nx.grad_check(lambda: Tensor(3.0), [W]) == 0.0


def test_grad_check_reports_non_finite():
    W = Parameter("W", np.array([1e-4, 1.0]))
    with pytest.raises(FloatingPointError, match=r"W\[0\]"), np.errstate(invalid="ignore"):
        nx.grad_check(lambda: nx.sum_(nx.sqrt(W)), [W], eps=1e-3)


# every differentiable primitive against central differences
def _p(rng, shape, name="x", positive=False):
    v = rng.normal(size=shape)
    return Parameter(name, np.abs(v) + 0.5 if positive else v)


PRIMITIVES = {
    "add_broadcast": lambda r: ((a := _p(r, (3, 4))), (b := _p(r, (4,), "b")),
                                lambda: nx.sum_(nx.mul(nx.add(a, b), nx.add(a, b)))),
    "sub": lambda r: ((a := _p(r, (2, 3))), (b := _p(r, (2, 3), "b")),
                      lambda: nx.sum_(nx.mul(nx.sub(a, b), a))),
    "div": lambda r: ((a := _p(r, (2, 3))), (b := _p(r, (2, 3), "b", True)),
                      lambda: nx.sum_(nx.div(a, b))),
    "exp_sqrt": lambda r: ((a := _p(r, (5,), positive=True)), None,
                           lambda: nx.sum_(nx.mul(nx.exp(nx.mul(a, 0.3)), nx.sqrt(a)))),
    "gelu_silu": lambda r: ((a := _p(r, (6,))), None, lambda: nx.sum_(nx.mul(nx.gelu(a), nx.silu(a)))),
    "matmul_batched": lambda r: ((a := _p(r, (2, 3, 4))), (b := _p(r, (4, 2), "b")),
                                 lambda: nx.sum_(nx.mul(nx.matmul(a, b), nx.matmul(a, b)))),
    "transpose_reshape": lambda r: ((a := _p(r, (2, 3, 4))), None,
                                    lambda: nx.sum_(nx.mul(nx.reshape(nx.transpose(a), (2, 12)),
                                                           np.arange(24.0).reshape(2, 12)))),
    "mean_axis": lambda r: ((a := _p(r, (3, 4))), None,
                            lambda: nx.sum_(nx.mul(nx.mean(a, axis=0), nx.mean(a, axis=0)))),
    "softmax": lambda r: ((a := _p(r, (3, 5))), None,
                          lambda: nx.sum_(nx.mul(nx.softmax(a, axis=-1), np.arange(15.0).reshape(3, 5)))),
    "layer_norm": lambda r: ((a := _p(r, (2, 6))), None,
                             lambda: nx.sum_(nx.mul(nx.layer_norm(a), np.arange(12.0).reshape(2, 6)))),
    "concat_slice": lambda r: ((a := _p(r, (2, 3))), (b := _p(r, (2, 2), "b")),
                               lambda: nx.sum_(nx.mul(nx.slice_last(nx.concat([a, b], -1), 1, 4),
                                                      nx.slice_last(nx.concat([b, a], -1), 0, 3)))),
    "broadcast_to": lambda r: ((a := _p(r, (1, 3))), None,
                               lambda: nx.sum_(nx.mul(nx.broadcast_to(a, (4, 3)), np.arange(12.0).reshape(4, 3)))),
    "gather_rows": lambda r: ((a := _p(r, (2, 5, 3))), None,
                              lambda: nx.sum_(nx.mul(nx.gather_rows(a, np.array([[0, 2, 2], [4, 1, 3]])),
                                                     np.arange(18.0).reshape(2, 3, 3)))),
    "conv3x3": lambda r: ((a := _p(r, (2, 4, 4, 3))), (w := _p(r, (3, 3, 3, 2), "w")),
                          lambda: nx.sum_(nx.mul(nx.conv3x3(a, w), nx.conv3x3(a, w)))),
    "resize_down_up": lambda r: ((a := _p(r, (1, 6, 6, 2))), None,
                                 lambda: nx.sum_(nx.mul(nx.resize(nx.resize(a, (3, 3)), (4, 5)),
                                                        np.arange(40.0).reshape(1, 4, 5, 2)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    a, b, f = PRIMITIVES[name](np.random.default_rng(5))
    params = [p for p in (a, b) if p is not None]
    assert nx.grad_check(f, params, eps=1e-6) < 1e-4


def naive_conv(x, w):
    B, H, W, Ci = x.shape
    out = np.zeros((B, H, W, w.shape[3]))
    for b in range(B):
        for i in range(H):
            for j in range(W):
                for dy in range(3):
                    for dx in range(3):
                        y, xx = i + dy - 1, j + dx - 1
                        if 0 <= y < H and 0 <= xx < W:
                            out[b, i, j] += x[b, y, xx] @ w[dy, dx]
    return out


def test_conv_matches_loop():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(2, 5, 4, 3)), rng.normal(size=(3, 3, 3, 2))
    np.testing.assert_allclose(nx.conv3x3(x, w).data, naive_conv(x, w), atol=1e-12)


def naive_bilinear(img, h, w):
    H, W = img.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            sy = min(max((i + 0.5) * H / h - 0.5, 0), H - 1)
            sx = min(max((j + 0.5) * W / w - 0.5, 0), W - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            ly, lx = sy - y0, sx - x0
            out[i, j] = ((1 - ly) * (1 - lx) * img[y0, x0] + (1 - ly) * lx * img[y0, x1]
                         + ly * (1 - lx) * img[y1, x0] + ly * lx * img[y1, x1])
    return out


@pytest.mark.parametrize("size", [(4, 4), (16, 16), (5, 3), (8, 8)])
def test_resize_matches_pointwise_bilinear(size):
    img = np.random.default_rng(7).random((8, 8))
    np.testing.assert_allclose(nx.resize_grid(img, size), naive_bilinear(img, *size), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(1, 12), st.integers(1, 12))
def test_resize_of_constant_is_constant(c, h, w):
    np.testing.assert_allclose(nx.resize_grid(np.full((6, 6), c), (h, w)), c, atol=1e-12)


def test_dump_round_trip_and_header():
    a = np.arange(6.0).reshape(2, 3) / 7
    buf = io.BytesIO()
    nx.dump_tensor(a, buf)
    raw = buf.getvalue()
    assert raw.startswith(b"RCT1 2 2 3\n")
    assert len(raw) == len(b"RCT1 2 2 3\n") + 6 * 8
    buf.seek(0)
    np.testing.assert_array_equal(nx.load_tensor(buf), a)
    assert nx.load_tensor(buf) is None


def test_rng_reproducible():
    assert np.array_equal(nx.make_rng(3).normal(size=5), nx.make_rng(3).normal(size=5))
