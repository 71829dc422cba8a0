import numpy as np
import pytest

from segattack import autodiff as ad
from segattack.autodiff import Tensor, numerical_grad, relative_error

TOL = 1e-4


def check_unary(fn, x):
    """Autodiff vs central differences for ``sum(fn(x) * w)`` with random weights."""
    rng = np.random.default_rng(123)
    w = rng.uniform(-1, 1, size=fn(Tensor(x)).shape)

    def scalar(arr):
        return float(np.sum(fn(Tensor(arr)).data * w))

    xt = Tensor(x, requires_grad=True)
    got = ad.backward(ad.reduce_sum(ad.mul(fn(xt), Tensor(w))))[xt]
    return relative_error(got, numerical_grad(scalar, x))


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = Tensor(np.full((1, 1, 3, 3), 2.0))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_sum_kernel():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


def test_conv_even_kernel_with_padding_is_rejected():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ad.ShapeError, match="odd"):
        ad.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), padding=1)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, ho))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(ho):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradients_finite_difference():
    rng = np.random.default_rng(7)
    x = rng.uniform(-2, 2, size=(1, 2, 5, 5))
    w = rng.uniform(-2, 2, size=(3, 2, 3, 3))
    b = rng.uniform(-2, 2, size=3)
    xt, wt, bt = (Tensor(a, requires_grad=True) for a in (x, w, b))
    grads = ad.backward(ad.reduce_sum(ad.conv2d(xt, wt, bt, 1, 1)))

    def f_x(a):
        return ad.conv2d(Tensor(a), Tensor(w), Tensor(b), 1, 1).data.sum()

    def f_w(a):
        return ad.conv2d(Tensor(x), Tensor(a), Tensor(b), 1, 1).data.sum()

    assert relative_error(grads[xt], numerical_grad(f_x, x)) < TOL
    assert relative_error(grads[wt], numerical_grad(f_w, w)) < TOL
    np.testing.assert_allclose(grads[bt], np.full(3, 25.0))


@pytest.mark.parametrize("stride,pad", [(2, 1), (1, 0)])
def test_conv_input_gradient_strided(stride, pad):
    rng = np.random.default_rng(stride + pad)
    x = rng.uniform(-2, 2, size=(2, 2, 5, 5))
    w = rng.uniform(-2, 2, size=(3, 2, 3, 3))
    b = np.zeros(3)
    assert check_unary(lambda t: ad.conv2d(t, Tensor(w), Tensor(b), stride, pad), x) < TOL


def test_conv_shape_errors_name_dimension():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ad.ShapeError, match="Cin=2"):
        ad.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ad.ShapeError, match="H=4"):
        ad.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=0)
    with pytest.raises(ad.ShapeError, match="bias"):
        ad.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)), padding=1)


# ---------------------------------------------------------------- pooling / upsampling


def test_max_pool_constant_and_window():
    out = ad.max_pool2(Tensor(np.full((1, 2, 4, 6), 3.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 3), 3.0))
    win = ad.max_pool2(Tensor(np.array([[[[1.0, 5.0], [3.0, 2.0]]]])))
    assert win.data.item() == 5.0


def test_max_pool_rejects_odd():
    with pytest.raises(ad.ShapeError, match="even"):
        ad.max_pool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_max_pool_tie_goes_to_first_in_row_major_order():
    x = Tensor(np.array([[[[2.0, 2.0], [2.0, 2.0]]]]), requires_grad=True)
    g = ad.backward(ad.reduce_sum(ad.max_pool2(x)))[x]
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])
    x = Tensor(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]), requires_grad=True)
    g = ad.backward(ad.reduce_sum(ad.max_pool2(x)))[x]
    np.testing.assert_array_equal(g[0, 0], [[0.0, 1.0], [0.0, 0.0]])


def test_max_pool_gradient():
    x = np.random.default_rng(1).uniform(-2, 2, size=(2, 3, 4, 6))
    assert check_unary(ad.max_pool2, x) < TOL


def test_upsample_values_and_roundtrip():
    out = ad.upsample_nearest2(Tensor(np.full((1, 1, 1, 1), 7.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 5))
    back = ad.max_pool2(ad.upsample_nearest2(Tensor(x)))
    np.testing.assert_array_equal(back.data, x)


def test_upsample_gradient():
    x = np.random.default_rng(3).uniform(-2, 2, size=(1, 2, 3, 3))
    assert check_unary(ad.upsample_nearest2, x) < TOL


# ---------------------------------------------------------------- concat


def test_concat_shapes_and_identity():
    a = Tensor(np.random.default_rng(0).normal(size=(1, 2, 4, 4)))
    b = Tensor(np.zeros((1, 3, 4, 4)))
    assert ad.concat_channels(a, b).shape == (1, 5, 4, 4)
    empty = Tensor(np.zeros((1, 0, 4, 4)))
    np.testing.assert_array_equal(ad.concat_channels(a, empty).data, a.data)


def test_concat_gradient_is_ones():
    a = Tensor(np.zeros((1, 2, 4, 4)), requires_grad=True)
    b = Tensor(np.zeros((1, 3, 4, 4)), requires_grad=True)
    g = ad.backward(ad.reduce_sum(ad.concat_channels(a, b)))
    np.testing.assert_array_equal(g[a], np.ones(a.shape))
    np.testing.assert_array_equal(g[b], np.ones(b.shape))


def test_concat_spatial_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 8, 8\)"):
        ad.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 8, 8))))


# ---------------------------------------------------------------- elementwise / reductions


def test_elementwise_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(ad.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    assert ad.elementwise("relu", Tensor(-3.0)).item() == 0.0
    with pytest.raises(ValueError):
        ad.elementwise("tanh", Tensor(0.0))


def test_sigmoid_derivative_at_zero():
    z = Tensor(0.0, requires_grad=True)
    g = ad.backward(ad.sigmoid(z))[z]
    assert g == pytest.approx(0.25, abs=1e-15)
    fd = numerical_grad(lambda a: float(ad.sigmoid(Tensor(a)).data), np.array(0.0))
    assert fd == pytest.approx(0.25, rel=1e-8)


def test_sigmoid_is_finite_for_extreme_inputs():
    out = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_log_clamp_keeps_gradients_finite():
    x = Tensor([0.0, 1e-9, 0.5], requires_grad=True)
    out = ad.log(x)
    assert out.data[0] == pytest.approx(np.log(1e-7))
    g = ad.backward(ad.reduce_sum(out))[x]
    assert np.all(np.isfinite(g))
    np.testing.assert_array_equal(g[:2], [0.0, 0.0])


def test_binary_ops_reject_shape_mismatch():
    a, b = Tensor(np.zeros(3)), Tensor(np.zeros(4))
    for op in (ad.add, ad.sub, ad.mul, ad.div):
        with pytest.raises(ad.ShapeError):
            op(a, b)


def test_reductions():
    assert ad.reduce_sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert ad.reduce_mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    np.testing.assert_array_equal(ad.backward(ad.reduce_sum(x))[x], np.ones((2, 3)))
    np.testing.assert_array_equal(ad.backward(ad.reduce_mean(x))[x], np.full((2, 3), 1 / 6))


def test_reduce_over_axes():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    out = ad.reduce_sum(Tensor(x), (2, 3))
    np.testing.assert_allclose(out.data, x.sum(axis=(2, 3)))
    assert check_unary(lambda t: ad.reduce_sum(t, (2, 3)), x) < TOL


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = np.random.default_rng(0).normal(size=(3, 2))
    xt = Tensor(x, requires_grad=True)
    g = ad.backward(ad.reduce_sum(ad.mul(xt, xt)))[xt]
    np.testing.assert_allclose(g, 2 * x, rtol=0, atol=0)


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(ad.relu(x))


def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.mul(x, x)
    z = ad.reduce_sum(ad.add(y, y))  # y reused
    order = ad.topological_order(z)
    assert len(order) == len({id(n) for n in order})
    assert order.index(y) < order.index(z)
    np.testing.assert_array_equal(ad.backward(z)[x], 4 * x.data)


def test_backward_is_linear_in_the_root():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    l1 = ad.reduce_sum(ad.sigmoid(x))
    l2 = ad.reduce_sum(ad.mul(x, x))
    a, b = 0.7, 2.3
    combined = ad.backward(ad.add(ad.scale_const(l1, a), ad.scale_const(l2, b)))[x]
    expect = a * ad.backward(l1)[x] + b * ad.backward(l2)[x]
    np.testing.assert_allclose(combined, expect, atol=1e-10)


def test_no_grad_leaves_are_skipped():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    grads = ad.backward(ad.reduce_sum(ad.mul(x, c)))
    assert c not in grads and x in grads


def test_float32_mode_preserves_dtype():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32))
    b = Tensor(np.zeros(2, dtype=np.float32))
    out = ad.sigmoid(ad.conv2d(x, w, b, padding=1))
    assert out.dtype == np.float32
    assert ad.backward(ad.reduce_mean(out))[x].dtype == np.float32
