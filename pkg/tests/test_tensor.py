import numpy as np
import pytest

from mams.errors import DimensionError, UsageError
from mams.tensor import Tensor, _topological_order, add, is_grad_enabled, mul, no_grad, reshape


def test_leaf_defaults():
    t = Tensor([1.0, 2.0])
    assert t.is_leaf and not t.requires_grad and t.grad is None
    assert t.data.dtype == np.float64
    assert t.shape == (2,)


def test_add_mul_gradients_by_hand():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    (a * b + a).sum().backward()
    np.testing.assert_array_equal(a.grad, [5.0, 6.0, 7.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0, 3.0])


def test_shared_subexpression_gradients_sum():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    z = y * y  # x^4
    z.sum().backward()
    np.testing.assert_allclose(x.grad, [4 * 27.0])


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.ones(3), requires_grad=True)
    a = x * 2.0
    b = add(a, a)
    c = add(b, a)
    order = _topological_order(c.sum())
    assert len(order) == len({id(n) for n in order})
    c.sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))


def test_leaf_grad_accumulates_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0])
    x.zero_grad()
    assert x.grad is None


def test_sub_neg_mean_reshape():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = (reshape(x, (3, 2)) - Tensor(np.ones((3, 2)))).mean()
    y.backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))
    assert y.item() == pytest.approx(1.5)


def test_untracked_inputs_give_untracked_outputs():
    a = Tensor([1.0])
    out = a * 2.0
    assert not out.requires_grad
    with pytest.raises(UsageError):
        out.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.array([1.0, 10.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 20.0])


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_no_grad_blocks_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad and y.is_leaf


def test_detach():
    x = Tensor([1.0], requires_grad=True)
    d = (x * 2.0).detach()
    assert d.is_leaf and not d.requires_grad


def test_deep_chain_has_no_recursion_limit():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0])
