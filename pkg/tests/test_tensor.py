import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sthar.errors import ContractError, DimensionError, NumericError
from sthar.gradcheck import check_function
from sthar.params import ParamStore, backward
from sthar.tensor import (
    Tensor,
    activation,
    conv2d,
    default_dtype,
    elu,
    layer_norm,
    log_softmax,
    matmul,
    max_pool2d,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softmax_rows,
    sorted_mean,
    sum_,
    tanh,
)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


def naive_conv(x, k, stride, pad):
    c, h, w = x.shape
    nk, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((nk, ho, wo))
    for o in range(nk):
        for i in range(ho):
            for j in range(wo):
                total = 0.0
                for ch in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            total += xp[ch, i * stride + a, j * stride + b] * k[o, ch, a, b]
                out[o, i, j] = total
    return out


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = matmul(t64(np.eye(2)), t64([[5, 6], [7, 8]]))
    assert out.data.tolist() == [[5, 6], [7, 8]]


def test_matmul_matches_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    assert matmul(t64(a), t64(b)).data.tolist() == [[3.0], [7.0]]
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(t64(a), t64(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_zeros_annihilate():
    out = matmul(t64(np.zeros((2, 3))), t64(np.random.default_rng(1).standard_normal((3, 4))))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


def test_matmul_backward_rules():
    rng = np.random.default_rng(2)
    a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 2)), True)
    g = rng.standard_normal((3, 2))
    sum_(matmul(a, b) * t64(g)).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_matmul_associativity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b, c = (t64(rng.standard_normal((3, 3))) for _ in range(3))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=0, atol=1e-10)


def test_grad_of_sum_matmul_matches_finite_differences():
    rng = np.random.default_rng(4)
    err, _, _ = check_function(lambda A, B: sum_(matmul(A, B)), {"A": rng.standard_normal((3, 4)), "B": rng.standard_normal((4, 5))})
    assert err < 1e-6


# -- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel_sums_channels():
    x = np.random.default_rng(5).standard_normal((3, 4, 5))
    k = np.ones((1, 3, 1, 1))
    out = conv2d(t64(x), t64(k))
    np.testing.assert_allclose(out.data[0], x.sum(axis=0), atol=1e-12)


def test_conv_constant_image_all_ones_kernel():
    c, value = 2, 0.7
    out = conv2d(t64(np.full((c, 6, 6), value)), t64(np.ones((1, c, 3, 3))))
    np.testing.assert_allclose(out.data, 9 * c * value, atol=1e-12)


def test_conv_output_shape_formula():
    out = conv2d(t64(np.zeros((1, 5, 5))), t64(np.zeros((4, 1, 3, 3))), stride=2)
    assert out.shape == (4, 2, 2)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(DimensionError):
        conv2d(t64(np.zeros((1, 2, 2))), t64(np.zeros((1, 1, 5, 5))), padding=1)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_is_cross_correlation(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k = rng.standard_normal((2, 7, 6)), rng.standard_normal((3, 2, 3, 2))
    np.testing.assert_allclose(conv2d(t64(x), t64(k), stride=stride, padding=pad).data, naive_conv(x, k, stride, pad), atol=1e-12)


def test_conv_batch_equals_per_item():
    rng = np.random.default_rng(6)
    x, k, b = rng.standard_normal((4, 2, 8, 8)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    batched = conv2d(t64(x), t64(k), t64(b), padding=1).data
    for i in range(4):
        assert np.array_equal(batched[i], conv2d(t64(x[i]), t64(k), t64(b), padding=1).data)


# -- softmax ----------------------------------------------------------------


def test_softmax_spot_values():
    out = softmax_rows(t64([[0.0, np.log(3.0)]])).data[0]
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-10)
    np.testing.assert_allclose(softmax_rows(t64([[2.0] * 5])).data, 0.2, atol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_rows(t64([[0.0, np.nan]]))


def test_softmax_is_stable_for_large_inputs():
    out = softmax_rows(t64([[1000.0, 0.0], [-1000.0, -1000.0]])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[1], [0.5, 0.5])


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-50, 50))


@given(finite_rows, st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(softmax_rows(t64(x + c)).data, softmax_rows(t64(x)).data, rtol=1e-9, atol=1e-12)


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    out = softmax_rows(t64(x)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(out > 0) and np.all(out <= 1)


@given(finite_rows)
def test_log_softmax_matches_log_of_softmax(x):
    x = np.clip(x, -20, 20)
    np.testing.assert_allclose(log_softmax(t64(x)).data, np.log(softmax(t64(x)).data), atol=1e-12)


# -- activations ------------------------------------------------------------


def test_activation_spot_values():
    assert sigmoid(t64(0.0)).item() == 0.5
    assert tanh(t64(0.0)).item() == 0.0
    assert elu(t64(0.0)).item() == 0.0
    assert elu(t64(-1.0)).item() == pytest.approx(np.exp(-1.0) - 1.0, abs=1e-15)
    assert elu(t64(-1.0), alpha=2.0).item() == pytest.approx(2 * (np.exp(-1.0) - 1.0), abs=1e-15)
    assert relu(t64([-2.0, 3.0])).data.tolist() == [0.0, 3.0]


def test_activation_dispatch():
    x = t64([-1.0, 0.5])
    for kind, fn in [("tanh", tanh), ("sigmoid", sigmoid), ("relu", relu), ("elu", elu)]:
        assert np.array_equal(activation(x, kind).data, fn(x).data)
    with pytest.raises(ContractError):
        activation(x, "swish")


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        out = sigmoid(t64([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


# -- reductions, normalisation, pooling ------------------------------------


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=st.floats(-10, 10)))
def test_sorted_mean_is_order_invariant(x):
    perm = np.random.default_rng(0).permutation(len(x))
    a = sorted_mean(t64(x), axis=0).data
    assert np.array_equal(a, sorted_mean(t64(x[perm]), axis=0).data)
    np.testing.assert_allclose(a, x.mean(axis=0), atol=1e-12)


def test_layer_norm_rows_are_standardised():
    x = np.random.default_rng(7).standard_normal((4, 16)) * 3 + 5
    out = layer_norm(t64(x), t64(np.ones(16)), t64(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), x.var(axis=1) / (x.var(axis=1) + 1e-5), atol=1e-12)


def test_max_pool_ties_route_to_first_maximum():
    x = t64(np.ones((1, 2, 2)), True)
    sum_(max_pool2d(x, 2)).backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_max_pool_requires_divisible_extent():
    with pytest.raises(DimensionError):
        max_pool2d(t64(np.zeros((1, 3, 4))), 2)


# -- autodiff engine --------------------------------------------------------


def test_square_gradient():
    x = t64(3.0, True)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_rejects_non_scalar_root():
    x = t64([1.0, 2.0], True)
    with pytest.raises(ContractError):
        (x * x).backward()


def test_shared_node_visited_once():
    x = t64(2.0, True)
    y = x * x  # used twice below
    (y + y * y).backward()
    # d/dx (x² + x⁴) = 2x + 4x³
    assert x.grad == 2 * 2.0 + 4 * 8.0


def test_unreachable_parameter_gets_exact_zero():
    store = ParamStore()
    a = store.add("a", np.array([1.0, 2.0]))
    store.add("unused", np.array([3.0]))
    reached = backward(sum_(a * a), store)
    assert reached == {"a"}
    assert store["unused"].grad.tolist() == [0.0]
    assert store["a"].grad.tolist() == [2.0, 4.0]


def test_backward_twice_is_bit_identical():
    rng = np.random.default_rng(8)
    store = ParamStore()
    W = store.add("W", rng.standard_normal((4, 3)))
    x = t64(rng.standard_normal((5, 4)))
    loss = sum_(tanh(matmul(x, W)))
    backward(loss, store)
    first = W.grad.copy()
    backward(loss, store)
    assert np.array_equal(first, W.grad)


def test_broadcast_gradients_are_reduced():
    a, b = t64(np.ones((3, 4)), True), t64(np.ones(4), True)
    sum_(a * b).backward()
    assert b.grad.shape == (4,) and b.grad.tolist() == [3.0] * 4


def test_data_is_immutable():
    t = t64([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    src = np.array([1.0])
    t = Tensor(src)
    src[0] = 9.0
    assert t.data[0] == 1.0


def test_no_grad_records_nothing():
    x = t64(1.0, True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_default_dtype_scopes_precision():
    assert Tensor([1.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_grad_has_data_shape():
    rng = np.random.default_rng(9)
    x = t64(rng.standard_normal((2, 3, 4)), True)
    sum_(softmax(x, axis=1)).backward()
    assert x.grad.shape == x.shape and x.size == 24
