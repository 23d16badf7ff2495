"""Forward values against loop oracles, gradients against finite differences."""

import numpy as np
import pytest

from defectdet import autodiff as ad
from defectdet.errors import ConfigError, ContractError, NumericError, ShapeError

from .conftest import make_rng
from .oracles import conv2d_loops, finite_difference, max_pool_loops

UNIT_RTOL = 1e-4
UNIT_ATOL = 1e-7


def gradcheck(build, x0, eps=1e-6):
    """Compare backward() against central differences for scalar build(x)."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = ad.Tensor(x0, requires_grad=True)
    ad.backward(build(t))
    analytic = t.grad.ravel().copy()

    def f(flat):
        return build(ad.Tensor(flat.reshape(x0.shape))).item()

    numeric = finite_difference(f, x0.ravel(), eps)
    np.testing.assert_allclose(analytic, numeric, rtol=UNIT_RTOL, atol=UNIT_ATOL)


def weighted_sum(y, rng):
    """Scalar objective that makes every output coordinate matter."""
    w = ad.Tensor(rng.normal(size=y.shape))
    return ad.sum_all(ad.mul(y, w))


# ---------------------------------------------------------------------------
# forward values

@pytest.mark.parametrize("shape,kshape,stride,pad", [
    ((1, 5, 5), (1, 1, 3, 3), 1, 0),
    ((3, 8, 6), (4, 3, 3, 3), 1, 1),
    ((2, 9, 9), (3, 2, 3, 3), 2, 1),
    ((2, 10, 7), (2, 2, 1, 1), 3, 0),
    ((4, 6, 6), (5, 4, 5, 5), 1, 2),
])
def test_conv2d_matches_loop_oracle(shape, kshape, stride, pad):
    rng = make_rng(3)
    x = rng.normal(size=shape)
    k = rng.normal(size=kshape)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, stride, pad),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shape,window,stride", [
    ((1, 4, 4), 2, 2),
    ((3, 8, 6), 2, 2),
    ((2, 9, 9), 3, 3),
    ((2, 7, 5), 3, 2),
])
def test_max_pool_matches_loop_oracle(shape, window, stride):
    rng = make_rng(4)
    x = rng.normal(size=shape)
    out = ad.max_pool(ad.Tensor(x), window, stride)
    np.testing.assert_allclose(out.data, max_pool_loops(x, window, stride),
                               rtol=0, atol=0)


def test_max_pool_tie_routes_gradient_to_first_index():
    x = ad.Tensor(np.full((1, 2, 2), 3.0), requires_grad=True)
    ad.backward(ad.sum_all(ad.max_pool(x, 2, 2)))
    expected = np.zeros((1, 2, 2))
    expected[0, 0, 0] = 1.0  # row-major first among the four tied maxima
    np.testing.assert_array_equal(x.grad, expected)


def test_softmax_rows_are_distributions():
    rng = make_rng(5)
    x = rng.normal(size=(6, 5)) * 10
    y = ad.softmax(ad.Tensor(x))
    np.testing.assert_allclose(y.data.sum(axis=1), np.ones(6), rtol=1e-12)
    assert (y.data > 0).all()
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.testing.assert_allclose(y.data, e / e.sum(axis=1, keepdims=True), rtol=1e-12)


def test_softmax_stable_at_large_magnitudes():
    x = ad.Tensor(np.array([[1000.0, 0.0], [-1000.0, -999.0]]))
    y = ad.softmax(x).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y.sum(axis=1), np.ones(2), rtol=1e-12)


def test_smooth_l1_fixed_points():
    x = ad.Tensor(np.array([0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0]))
    y = ad.smooth_l1_elementwise(x).data
    np.testing.assert_allclose(y, [0.0, 0.125, 0.125, 0.5, 0.5, 1.5, 1.5],
                               rtol=0, atol=0)


def test_safe_log_clamps_and_kills_gradient_inside_clamp():
    x = ad.Tensor(np.array([0.0, 1e-13, 0.5]), requires_grad=True)
    y = ad.safe_log(x)
    np.testing.assert_allclose(y.data[:2], np.log(1e-12), rtol=1e-12)
    np.testing.assert_allclose(y.data[2], np.log(0.5), rtol=1e-12)
    ad.backward(ad.sum_all(y))
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 2.0], rtol=1e-12)


def test_bilinear_sample_exact_at_lattice_and_clamped_at_edges():
    rng = make_rng(6)
    x = rng.normal(size=(2, 4, 5))
    t = ad.Tensor(x)
    out = ad.bilinear_sample(t, np.array([0.0, 2.0, 3.0]), np.array([0.0, 3.0, 4.0]))
    np.testing.assert_allclose(out.data, x[:, [0, 2, 3], [0, 3, 4]], rtol=1e-12)
    clamped = ad.bilinear_sample(t, np.array([-5.0, 99.0]), np.array([99.0, -5.0]))
    np.testing.assert_allclose(clamped.data[:, 0], x[:, 0, 4], rtol=1e-12)
    np.testing.assert_allclose(clamped.data[:, 1], x[:, 3, 0], rtol=1e-12)


def test_bilinear_sample_linear_in_between():
    x = np.zeros((1, 2, 2))
    x[0] = [[0.0, 1.0], [2.0, 3.0]]
    out = ad.bilinear_sample(ad.Tensor(x), np.array([0.5]), np.array([0.5]))
    np.testing.assert_allclose(out.data, [[1.5]], rtol=1e-12)


# ---------------------------------------------------------------------------
# gradients

def test_grad_add_both_sides():
    rng = make_rng(10)
    b = rng.normal(size=(3, 4))
    gradcheck(lambda t: weighted_sum(ad.add(t, ad.Tensor(b)), make_rng(1)),
              rng.normal(size=(3, 4)))


def test_grad_add_const_and_sub_const():
    rng = make_rng(11)
    c = rng.normal(size=(4, 2))
    gradcheck(lambda t: weighted_sum(ad.add_const(t, c), make_rng(1)),
              rng.normal(size=(4, 2)))
    gradcheck(lambda t: weighted_sum(ad.sub_const(t, c), make_rng(2)),
              rng.normal(size=(4, 2)))


def test_grad_scale_and_mul():
    rng = make_rng(12)
    other = rng.normal(size=(5,))
    gradcheck(lambda t: weighted_sum(ad.scale(t, -2.5), make_rng(1)),
              rng.normal(size=(5,)))
    gradcheck(lambda t: weighted_sum(ad.mul(t, ad.Tensor(other)), make_rng(2)),
              rng.normal(size=(5,)))


def test_grad_reshape_transpose_pad():
    rng = make_rng(13)
    gradcheck(lambda t: weighted_sum(ad.reshape(t, (6, 2)), make_rng(1)),
              rng.normal(size=(3, 4)))
    gradcheck(lambda t: weighted_sum(ad.transpose(t, (2, 0, 1)), make_rng(2)),
              rng.normal(size=(2, 3, 4)))
    gradcheck(lambda t: weighted_sum(ad.pad2d(t, 1, 2, 0, 3), make_rng(3)),
              rng.normal(size=(2, 3, 4)))


def test_grad_relu_away_from_kink():
    rng = make_rng(14)
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 0.05] = 0.1  # keep finite differences off the kink
    gradcheck(lambda t: weighted_sum(ad.relu(t), make_rng(1)), x)


def test_grad_smooth_l1_away_from_kinks():
    rng = make_rng(15)
    x = rng.normal(size=(20,)) * 2
    x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.5
    gradcheck(lambda t: weighted_sum(ad.smooth_l1_elementwise(t), make_rng(1)), x)


def test_grad_softmax_and_safe_log():
    rng = make_rng(16)
    gradcheck(lambda t: weighted_sum(ad.softmax(t), make_rng(1)),
              rng.normal(size=(4, 5)))
    x = rng.random((6,)) + 0.1
    gradcheck(lambda t: weighted_sum(ad.safe_log(t), make_rng(2)), x)


def test_grad_gathers_accumulate_duplicates():
    rng = make_rng(17)
    idx = np.array([0, 2, 2, 1, 0])
    gradcheck(lambda t: weighted_sum(ad.gather_rows(t, idx), make_rng(1)),
              rng.normal(size=(3, 4)))
    per_row = np.array([1, 0, 3, 2])
    gradcheck(lambda t: weighted_sum(ad.take_per_row(t, per_row), make_rng(2)),
              rng.normal(size=(4, 4)))
    cols = np.array([[0, 1], [2, 2], [5, 0]])
    gradcheck(lambda t: weighted_sum(ad.take_columns(t, cols), make_rng(3)),
              rng.normal(size=(3, 6)))


def test_grad_stack_rows_all_inputs():
    rng = make_rng(18)
    shapes = rng.normal(size=(3, 2, 2))

    def build(t):
        parts = [t, ad.Tensor(shapes[1]), ad.Tensor(shapes[2])]
        return weighted_sum(ad.stack_rows(parts), make_rng(1))

    gradcheck(build, shapes[0])


def test_grad_linear_all_three_inputs():
    rng = make_rng(19)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(2,))
    gradcheck(lambda t: weighted_sum(ad.linear(t, ad.Tensor(w), ad.Tensor(b)),
                                    make_rng(1)), x)
    gradcheck(lambda t: weighted_sum(ad.linear(ad.Tensor(x), t, ad.Tensor(b)),
                                    make_rng(2)), w)
    gradcheck(lambda t: weighted_sum(ad.linear(ad.Tensor(x), ad.Tensor(w), t),
                                    make_rng(3)), b)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_grad_conv2d_input_and_kernels(stride, pad):
    rng = make_rng(20)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    gradcheck(lambda t: weighted_sum(
        ad.conv2d(t, ad.Tensor(k), stride=stride, pad=pad), make_rng(1)), x)
    gradcheck(lambda t: weighted_sum(
        ad.conv2d(ad.Tensor(x), t, stride=stride, pad=pad), make_rng(2)), k)


def test_grad_add_channel_bias():
    rng = make_rng(21)
    x = rng.normal(size=(3, 4, 4))
    b = rng.normal(size=(3,))
    gradcheck(lambda t: weighted_sum(ad.add_channel_bias(t, ad.Tensor(b)),
                                    make_rng(1)), x)
    gradcheck(lambda t: weighted_sum(ad.add_channel_bias(ad.Tensor(x), t),
                                    make_rng(2)), b)


def test_grad_bilinear_sample_interior_points():
    rng = make_rng(22)
    x = rng.normal(size=(2, 6, 7))
    ys = rng.uniform(0.3, 4.7, size=11)
    xs = rng.uniform(0.3, 5.7, size=11)
    gradcheck(lambda t: weighted_sum(ad.bilinear_sample(t, ys, xs), make_rng(1)), x)


def test_grad_max_pool_with_strict_maxima():
    rng = make_rng(23)
    x = rng.normal(size=(2, 6, 6))
    x += rng.permutation(x.size).reshape(x.shape) * 1e-3  # break ties
    gradcheck(lambda t: weighted_sum(ad.max_pool(t, 2, 2), make_rng(1)), x)
    gradcheck(lambda t: weighted_sum(ad.max_pool(t, 3, 3), make_rng(2)), x)


def test_grad_sum_all():
    rng = make_rng(24)
    gradcheck(lambda t: ad.sum_all(t), rng.normal(size=(3, 3)))


# ---------------------------------------------------------------------------
# graph mechanics and contracts

def test_diamond_reuse_accumulates():
    x = ad.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = ad.add(ad.scale(x, 2.0), ad.scale(x, 3.0))
    ad.backward(ad.sum_all(y))
    np.testing.assert_allclose(x.grad, [5.0, 5.0], rtol=1e-12)


def test_backward_is_repeatable():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = ad.sum_all(ad.mul(x, x))
    ad.backward(loss)
    first = x.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_gradient_map_fills_untouched_with_zeros():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    b = ad.Tensor(np.ones(2), requires_grad=True)
    ad.backward(ad.sum_all(a))
    grads = ad.gradient_map({"a": a, "b": b})
    np.testing.assert_array_equal(grads["a"], np.ones(3))
    np.testing.assert_array_equal(grads["b"], np.zeros(2))


def test_no_grad_graph_skips_backprop_closures():
    x = ad.Tensor(np.ones((2, 2)))
    y = ad.relu(x)
    assert not y.requires_grad
    assert y._backprop is None


def test_deep_chain_no_recursion_limit():
    x = ad.Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(3000):
        y = ad.add_const(y, 0.0)
    ad.backward(ad.sum_all(y))
    np.testing.assert_array_equal(x.grad, [1.0])


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        ad.Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NumericError):
        ad.Tensor(np.array([np.inf]))


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.relu(x))


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        ad.Tensor(np.ones(2)).item()


def test_shape_errors():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        ad.add(a, b)
    with pytest.raises(ShapeError):
        ad.mul(a, b)
    with pytest.raises(ShapeError):
        ad.linear(a, b, ad.Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.ones((2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_rejects_inexact_output_size():
    x = ad.Tensor(np.ones((1, 5, 5)))
    k = ad.Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(ConfigError):
        ad.conv2d(x, k, stride=2, pad=0)


def test_max_pool_rejects_non_tiling_window():
    with pytest.raises(ConfigError):
        ad.max_pool(ad.Tensor(np.ones((1, 5, 5))), 2, 2)


def test_operator_sugar():
    a = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = ad.Tensor(np.array([3.0, 4.0]))
    np.testing.assert_array_equal((a + b).data, [4.0, 6.0])
    np.testing.assert_array_equal((a * 2.0).data, [2.0, 4.0])
    np.testing.assert_array_equal((a - b).data, [-2.0, -2.0])
    np.testing.assert_array_equal((-a).data, [-1.0, -2.0])
    np.testing.assert_array_equal((a + 1.0).data, [2.0, 3.0])
