import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from msmunet import tensor as T
from msmunet.gradcheck import check_gradients, relative_error
from msmunet.tensor import Tensor, no_grad, unbroadcast


def test_add_mul_backward_values():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    ((a * b) + a).sum().backward()
    np.testing.assert_array_equal(a.grad, [5.0, 6.0, 7.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0, 3.0])


def test_gradients_accumulate_over_reuse():
    x = Tensor(3.0, requires_grad=True)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)
    (x * 2.0).backward()
    assert x.grad == pytest.approx(9.0)


def test_broadcast_gradient_is_summed():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_incompatible_shapes_name_both():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y._prev == ()


def test_backward_needs_scalar_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_intermediates_freed_leaves_kept():
    x = Tensor(np.ones(3), requires_grad=True)
    h = x * 2.0
    (h * h).sum().backward()
    assert h.grad is None and h._prev == ()
    np.testing.assert_array_equal(x.grad, [8.0, 8.0, 8.0])


def test_sigmoid_stable_at_extremes():
    y = T.sigmoid(Tensor([-800.0, 0.0, 800.0]))
    np.testing.assert_array_equal(y.data, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(y.data))


def test_softplus_and_silu_values():
    x = Tensor([0.0, 1.0])
    np.testing.assert_allclose(T.softplus(x).data, [np.log(2.0), np.log1p(np.e)], rtol=1e-15)
    np.testing.assert_allclose(T.silu(x).data, [0.0, 1.0 / (1.0 + np.exp(-1.0))], rtol=1e-15)


def test_softmax_rows_sum_to_one():
    y = T.softmax(Tensor(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])), axis=1)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=1e-15)
    np.testing.assert_allclose(y.data[1], 1 / 3)


def test_max_routes_gradient_to_argmax():
    x = Tensor([[1.0, 5.0, 2.0]], requires_grad=True)
    T.tmax(x, axis=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_getitem_scatter_with_repeats():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 3])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 0.0, 1.0])


def test_split_concat_inverse():
    x = Tensor(np.arange(10.0).reshape(2, 5), requires_grad=True)
    parts = T.split(x, [2, 3], axis=1)
    y = T.concat(parts, axis=1)
    np.testing.assert_array_equal(y.data, x.data)
    (y * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    np.testing.assert_array_equal(x.grad, np.arange(10.0).reshape(2, 5))


def test_split_sizes_must_cover_axis():
    with pytest.raises(ValueError):
        T.split(Tensor(np.ones((2, 5))), [2, 2], axis=1)


def test_float32_path_keeps_dtype():
    with T.default_dtype(np.float32):
        y = T.sigmoid(Tensor(np.ones(3)) * 2.0)
    assert y.data.dtype == np.float32
    assert T.get_default_dtype() is np.float64


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-12]), floor=1e-8) == pytest.approx(1e-4)


@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=4),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_unbroadcast_inverts_broadcast(a):
    target = (1,) * a.ndim
    g = np.ones(a.shape)
    assert unbroadcast(g, target).item() == pytest.approx(a.size)
    assert unbroadcast(g, a.shape).shape == a.shape


@given(st.integers(0, 10_000))
def test_composite_expression_gradient(seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(r.uniform(0.5, 2.0, size=(3,)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 2)))

    def f():
        h = T.silu(a / b) @ w
        return (T.log(T.exp(h) + 1.0) * h).mean()

    assert check_gradients(f, [a, b], max_entries=None) < 1e-6
