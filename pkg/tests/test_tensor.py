import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fuse_ser import gradcheck
from fuse_ser.tensor import DimensionError, Tensor, log_softmax, stack_rows, topological_order

finite = st.floats(-10, 10, allow_nan=False, width=32)


def test_float32_storage_by_default():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64  # reference precision is kept


def test_sum_gives_unit_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_repeated_backward_accumulates():
    x = Tensor([1.0, -3.0], requires_grad=True)
    for _ in range(3):
        (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_visited_once():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_topological_order_inputs_precede_consumers():
    a = Tensor([1.0], requires_grad=True)
    b = a * 2.0
    c = b + a
    d = c * b
    order = topological_order(d.sum())
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    assert len(order) == len({id(t) for t in order})


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_log_softmax_rows_normalise():
    z = Tensor(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]]))
    out = log_softmax(z).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, rtol=1e-12)


def test_stack_rows_shape():
    parts = [Tensor(np.ones(3)), Tensor(np.zeros(3))]
    assert stack_rows(parts).shape == (3, 2)


def test_dimension_error_names_axis():
    err = DimensionError("bad", axis="C")
    assert err.axis == "C"


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_backward_is_deterministic(a, b):
    grads = []
    for _ in range(2):
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        (log_softmax(ta * tb + ta) * tb).sum().backward()
        grads.append((ta.grad.copy(), tb.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0]) and np.array_equal(grads[0][1], grads[1][1])


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_elementwise_ops_pass_gradcheck(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    res = gradcheck.check("mix", lambda: (ta * tb - tb + ta * 0.5).sum(axis=0), {"a": ta, "b": tb})
    assert res.passed, res.errors
