import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppmseg.errors import ContractError, ShapeError
from ppmseg.layers import Conv2dParams, conv2d, sigmoid
from ppmseg.metrics import gdl
from ppmseg.tensor import Tensor, add, backward, grad_check, mul, no_grad, scalar_mul, sum_all, tensor_from


def test_tensor_from_zero_and_singleton():
    z = tensor_from((1, 1, 2, 2), [0, 0, 0, 0])
    assert z.shape == (1, 1, 2, 2) and not z.data.any()
    assert z.data.dtype == np.float32 and not z.requires_grad
    assert tensor_from((1, 1, 1, 1), [7]).item() == 7.0


def test_tensor_from_length_mismatch():
    with pytest.raises(ShapeError):
        tensor_from((1, 1, 2, 2), [1, 2, 3])


def test_zero_dims_rejected():
    with pytest.raises(ShapeError):
        tensor_from((1, 0, 2, 2), [])


def test_elementwise_identities():
    x = tensor_from((1, 1, 2, 2), [1, 2, 3, 4])
    assert np.array_equal(add(x, tensor_from((1, 1, 2, 2), [0] * 4)).data, x.data)
    assert np.array_equal(mul(x, tensor_from((1, 1, 2, 2), [1] * 4)).data, x.data)
    assert sum_all(x).item() == 10.0
    assert np.array_equal(scalar_mul(x, 2.0).data, 2 * x.data)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        add(tensor_from((1, 1, 2, 2), [0] * 4), tensor_from((1, 1, 1, 4), [0] * 4))
    with pytest.raises(ShapeError):
        mul(tensor_from((1, 1, 2, 2), [0] * 4), tensor_from((1, 2, 2, 2), [0] * 8))


def test_backward_square():
    x = tensor_from((1, 1, 2, 2), [1, 2, 3, 4], requires_grad=True)
    backward(sum_all(mul(x, x)))
    assert np.array_equal(x.grad, np.array([2, 4, 6, 8], np.float32).reshape(1, 1, 2, 2))


def test_backward_linear_gives_ones(rng):
    x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 2, 2), np.float32))


def test_backward_rejects_non_scalar():
    x = tensor_from((1, 1, 2, 2), [1, 2, 3, 4], requires_grad=True)
    with pytest.raises(ContractError):
        backward(mul(x, x))


def test_backward_requires_graph():
    with pytest.raises(ContractError):
        backward(sum_all(tensor_from((1, 1, 1, 2), [1, 2])))


def test_gradient_accumulates_across_uses():
    x = tensor_from((1, 1, 1, 3), [1, 2, 3], requires_grad=True)
    backward(sum_all(add(x, x)))
    assert np.array_equal(x.grad.ravel(), [2, 2, 2])


def test_backward_twice_doubles(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    loss = sum_all(mul(x, x))
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_allclose(x.grad, 2 * first, rtol=1e-6)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_skips_recording():
    x = tensor_from((1, 1, 1, 2), [1, 2], requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_only_leaves_receive_grad():
    x = tensor_from((1, 1, 1, 2), [1, 2], requires_grad=True)
    y = mul(x, x)
    backward(sum_all(y))
    assert y.grad is None and x.grad is not None


def test_conv_grad_matches_central_differences(rng):
    # loss = sum(conv2d(x, w)): autodiff vs a finite-difference loop written here
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    p = Conv2dParams(Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)), padding=1)
    backward(sum_all(conv2d(x, p)))
    eps = 1e-3
    base = x.data.astype(np.float64)
    num = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        hi, lo = base.copy(), base.copy()
        hi[idx] += eps
        lo[idx] -= eps
        f = lambda a: conv2d(Tensor(a.astype(np.float32)), p).data.astype(np.float64).sum()  # noqa: E731
        num[idx] = (f(hi) - f(lo)) / (2 * eps)
    rel = np.abs(x.grad - num) / np.maximum(1e-8, np.abs(x.grad) + np.abs(num))
    assert rel.max() < 1e-2


def test_grad_check_linear_is_exact(rng):
    assert grad_check(sum_all, Tensor(rng.normal(size=(2, 2, 3, 3))), 1e-3) < 1e-6


def test_grad_check_sigmoid(rng):
    x = Tensor(rng.uniform(-2, 2, size=(1, 2, 4, 4)))
    assert grad_check(lambda t: sum_all(sigmoid(t)), x, 1e-3) < 1e-2


def test_grad_check_gdl(rng):
    r = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float32)
    x = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)))
    assert grad_check(lambda t: gdl(t, r), x, 1e-3) < 1e-2


def test_grad_check_detects_wrong_gradient(rng):
    from ppmseg.tensor import make_result

    def bad_square(t):
        d = t.data
        return sum_all(make_result(d * d, (t,), lambda g: (g * d,), "bad"))  # missing factor 2

    assert grad_check(bad_square, Tensor(rng.uniform(0.5, 1, size=(1, 1, 2, 2))), 1e-3) > 0.1


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        grad_check(sum_all, tensor_from((1, 1, 1, 1), [1]), 0.0)


@settings(max_examples=25, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 4)] * 4),
    seed=st.integers(0, 2**16),
)
def test_elementwise_grads_property(shape, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.uniform(-1, 1, size=shape))
    b = Tensor(r.uniform(-1, 1, size=shape))
    assert grad_check(lambda t: sum_all(mul(add(t, b), b)), a, 1e-3) < 1e-2
