import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mams import functional as F
from mams.errors import DimensionError, UsageError
from mams.tensor import Tensor


def naive_conv(x, w, b, stride, pad):
    """Direct loop cross-correlation, the textbook definition."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[i, oc, r, s] = np.sum(patch * w[oc]) + (b[oc] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1), (5, 2, 2), (3, 2, 0), (3, 1, 0)])
def test_conv2d_matches_naive_loop(rng, k, stride, pad):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_input_gradient_matches_adjoint_of_naive_loop(rng):
    # <conv(x), g> is linear in x, so d/dx equals the adjoint applied to g; build it column by column
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(1, 3, 3, 3))
    xt = Tensor(x, requires_grad=True)
    (F.conv2d(xt, Tensor(w), None, 2, 1) * Tensor(g)).sum().backward()
    expect = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1.0
        expect[idx] = np.sum(naive_conv(e, w, None, 2, 1) * g)
    np.testing.assert_allclose(xt.grad, expect, rtol=1e-12, atol=1e-12)


def test_conv2d_without_bias_and_output_size():
    x = Tensor(np.ones((1, 1, 7, 7)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = F.conv2d(x, w, None, 2, 1)
    assert out.shape == (1, 1, 4, 4)
    assert out.data[0, 0, 0, 0] == 4.0 and out.data[0, 0, 1, 1] == 9.0
    assert F.conv_output_size(224, 3, 2, 1) == 112


@pytest.mark.parametrize("xs,ws", [
    ((1, 3, 5, 5), (2, 4, 3, 3)),   # channel mismatch
    ((3, 5, 5), (2, 3, 3, 3)),      # not 4-D
    ((1, 3, 5, 5), (2, 3, 2, 2)),   # even kernel
    ((1, 3, 2, 2), (2, 3, 5, 5)),   # kernel larger than padded input
])
def test_conv2d_rejects_bad_shapes(xs, ws):
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ws)))


def test_batch_norm_train_normalizes_and_updates_running_stats(rng):
    x = rng.normal(3.0, 2.0, size=(8, 4, 3, 3))
    st_ = F.BatchNormState(4)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), st_, F.TRAIN, eps=0.0)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-10)
    mean = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(st_.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * var_unbiased, rtol=1e-12)


def test_batch_norm_eval_uses_running_stats(rng):
    st_ = F.BatchNormState(3)
    st_.running_mean[:] = [1.0, 2.0, 3.0]
    st_.running_var[:] = [4.0, 1.0, 0.25]
    x = rng.normal(size=(5, 3))
    out = F.batch_norm(Tensor(x), Tensor(np.full(3, 2.0)), Tensor(np.ones(3)), st_, F.EVAL, eps=0.0)
    np.testing.assert_allclose(out.data, 2.0 * (x - [1, 2, 3]) / np.sqrt([4.0, 1.0, 0.25]) + 1.0, rtol=1e-12)


def test_batch_norm_update_stats_off_freezes_buffers(rng):
    st_ = F.BatchNormState(2)
    F.batch_norm(Tensor(rng.normal(size=(4, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, F.TRAIN,
                 update_stats=False)
    np.testing.assert_array_equal(st_.running_mean, 0.0)
    np.testing.assert_array_equal(st_.running_var, 1.0)


def test_batch_norm_errors():
    with pytest.raises(UsageError):
        F.batch_norm(Tensor(np.zeros((2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, F.EVAL)
    with pytest.raises(DimensionError):
        F.batch_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, F.TRAIN)


def test_activations_by_hand():
    x = Tensor([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(F.relu(x).data, [0.0, 0.0, 3.0])
    s = 1 / (1 + np.exp(-np.array([-2.0, 0.0, 3.0])))
    np.testing.assert_allclose(F.sigmoid(x).data, s, rtol=1e-15)
    np.testing.assert_allclose(F.silu(x).data, np.array([-2.0, 0.0, 3.0]) * s, rtol=1e-15)


def test_linear_and_pool_by_hand():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0, 0.0], [1.0, -1.0], [0.5, 0.5]])
    np.testing.assert_array_equal(F.linear(x, w, Tensor([0.0, 1.0, 2.0])).data, [[1.0, 0.0, 3.5]])
    p = F.global_avg_pool(Tensor(np.arange(8.0).reshape(1, 2, 2, 2)))
    np.testing.assert_array_equal(p.data, [[1.5, 5.5]])


def test_dropout_modes(rng):
    x = Tensor(np.ones((200, 50)))
    assert F.dropout(x, 0.3, F.EVAL) is x
    out = F.dropout(x, 0.3, F.TRAIN, rng).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.7}
    assert abs((out == 0).mean() - 0.3) < 0.02
    assert abs(out.mean() - 1.0) < 0.03
    with pytest.raises(UsageError):
        F.dropout(x, 0.3, F.TRAIN, None)
    with pytest.raises(UsageError):
        F.dropout(x, 1.0, F.TRAIN, rng)


def test_bad_mode_rejected():
    with pytest.raises(UsageError):
        F.dropout(Tensor([1.0]), 0.1, "training")


def test_stop_gradient_cuts_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = F.stop_gradient(x * 2.0)
    assert not y.requires_grad
    np.testing.assert_array_equal(y.data, [2.0, 4.0])


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), k=st.sampled_from([1, 3, 5]), s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_output_shape_property(h, k, s, p):
    if h + 2 * p < k:
        return
    out = F.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((2, 1, k, k))), None, s, p)
    assert out.shape == (1, 2, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)
