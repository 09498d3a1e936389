import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miad.autograd import GradientError, Tensor, parameter


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(fn, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    xs = [rng.random(s) + 0.5 if positive else rng.standard_normal(s) for s in shapes]
    leaves = [parameter(x) for x in xs]
    fn(*leaves).sum().backward()
    for k, x in enumerate(xs):

        def f(v, k=k):
            args = [Tensor(a) for a in xs]
            args[k] = Tensor(v)
            return float(fn(*args).sum().data)

        np.testing.assert_allclose(leaves[k].grad, numeric_grad(f, x), rtol=1e-6, atol=1e-7)


def test_elementwise_ops():
    check(lambda a, b: a * b + a - b, (3, 4), (3, 4))
    check(lambda a, b: a / b, (3,), (3,), positive=True)
    check(lambda a: a**3 - 2.0 * a, (5,))
    check(lambda a: a.exp() + a.silu(), (2, 3))
    check(lambda a: a.log(), (4,), positive=True)
    check(lambda a: 1.0 / a - 3.0, (4,), positive=True)


def test_broadcasting_reductions_and_matmul():
    check(lambda a, b: a + b, (2, 3, 4), (4,))
    check(lambda a, b: a @ b, (2, 3, 4), (4, 5))
    check(lambda a: a.mean(axis=1) * a.sum(axis=0, keepdims=True).sum(), (3, 4))
    check(lambda a: a.reshape(6, 2) @ a.reshape(2, 6), (3, 4))
    check(lambda a: (a * a).log_softmax(axis=-1) * a, (3, 5))


def test_gather_accumulates_repeated_rows():
    w = parameter(np.arange(6.0).reshape(3, 2))
    w[np.array([0, 2, 0])].sum().backward()
    np.testing.assert_array_equal(w.grad, [[2, 2], [0, 0], [1, 1]])


def test_shared_subexpression():
    x = parameter(np.array([1.5, -0.5]))
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


def test_backward_requires_scalar_or_adjoint():
    x = parameter(np.ones(3))
    with pytest.raises(GradientError):
        (x * 2).backward()
    (x * 2).backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_array_on_left_defers_to_tensor():
    x = parameter(np.ones(2))
    out = np.array([2.0, 3.0]) * x
    assert isinstance(out, Tensor)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_log_softmax_normalized(xs):
    out = Tensor(np.array(xs)).log_softmax().data
    assert abs(np.exp(out).sum() - 1) < 1e-12
