"""Reverse-mode engine: per-op gradients against finite differences
and the tape's accounting rules."""

import numpy as np
import pytest

from intrinsic.autodiff import (
    RunningStats,
    Tape,
    Tensor,
    activation,
    add,
    backward,
    batch_norm2d,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    custom_op,
    mean_all,
    mul_broadcast_channel,
    mul_elementwise,
    scale,
    scalar,
)
from intrinsic.errors import ContractError, DimensionError

from tests.conftest import assert_close, numeric_grad


def _tensor(rng, shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


def _check_op(build, tensors, rtol=1e-6, eps=1e-6):
    """Backprop build(*tensors) reduced to a mean and compare with fd."""
    with Tape() as tape:
        out = build(*tensors)
        loss = mean_all(out) if out.data.size > 1 else out
    backward(tape, loss)
    for t in tensors:
        if not t.requires_grad:
            continue

        def f(t=t):
            return (build(*tensors).data.mean()
                    if out.data.size > 1 else build(*tensors).data.item())

        num, mask = numeric_grad(f, t.data, eps=eps, max_entries=60)
        assert_close(t.grad[mask], num[mask], rtol)


def test_add_mul_gradients(rng):
    a = _tensor(rng, (2, 3, 4, 4))
    b = _tensor(rng, (2, 3, 4, 4))
    _check_op(add, [a, b])
    a.zero_grad(), b.zero_grad()
    _check_op(mul_elementwise, [a, b])


def test_mul_broadcast_channel_gradients(rng):
    a = _tensor(rng, (2, 3, 4, 4))
    s = _tensor(rng, (2, 1, 4, 4))
    _check_op(mul_broadcast_channel, [a, s])


def test_concat_and_scale_gradients(rng):
    a = _tensor(rng, (1, 2, 4, 4))
    b = _tensor(rng, (1, 3, 4, 4))
    _check_op(concat_channels, [a, b])
    a.zero_grad()
    _check_op(lambda t: scale(t, -2.5), [a])


def test_scale_with_array_factor(rng):
    a = _tensor(rng, (2, 1, 1, 1))
    factor = np.array([0.5, 2.0]).reshape(2, 1, 1, 1)
    with Tape() as tape:
        loss = mean_all(scale(a, factor))
    backward(tape, loss)
    assert_close(a.grad, factor / a.data.size, 1e-12)


def test_activation_gradients(rng):
    x = _tensor(rng, (2, 2, 3, 3))
    _check_op(lambda t: activation(t, "relu"), [x], rtol=1e-5)
    x.zero_grad()
    _check_op(lambda t: activation(t, "softplus"), [x])


def test_softplus_overflow_safe():
    x = Tensor(np.full((1, 1, 1, 1), 800.0))
    out = activation(x, "softplus")
    assert np.isfinite(out.data).all()
    assert out.data.item() == 800.0


def test_conv2d_gradients(rng):
    x = _tensor(rng, (2, 3, 6, 6))
    w = _tensor(rng, (4, 3, 3, 3))
    b = _tensor(rng, (1, 4, 1, 1))
    _check_op(lambda x_, w_, b_: conv2d(x_, w_, b_, stride=1, padding=1), [x, w, b])
    for t in (x, w, b):
        t.zero_grad()
    _check_op(lambda x_, w_, b_: conv2d(x_, w_, b_, stride=2, padding=1), [x, w, b])


def test_conv2d_validates_geometry(rng):
    x = _tensor(rng, (1, 3, 6, 6))
    w_even = _tensor(rng, (2, 3, 2, 2))
    with pytest.raises(ContractError):
        conv2d(x, w_even, None, stride=1, padding=0)
    w_bad_ch = _tensor(rng, (2, 4, 3, 3))
    with pytest.raises(DimensionError):
        conv2d(x, w_bad_ch, None, stride=1, padding=1)


def test_batch_norm_gradients(rng):
    # a plain mean of the output is independent of x and gamma (the
    # normalized activations have zero batch mean), so weight the
    # reduction to make every gradient entry informative
    x = _tensor(rng, (3, 2, 4, 4))
    gamma = Tensor(rng.uniform(0.5, 1.5, (1, 2, 1, 1)), requires_grad=True)
    beta = _tensor(rng, (1, 2, 1, 1))
    wts = Tensor(rng.standard_normal((3, 2, 4, 4)))
    stats = RunningStats(2)

    def build(x_, g_, b_):
        out = batch_norm2d(x_, g_, b_, stats, training=True)
        return mul_elementwise(out, wts)

    _check_op(build, [x, gamma, beta], rtol=1e-5)


def test_batch_norm_running_stats_update(rng):
    x = Tensor(rng.standard_normal((4, 2, 5, 5)))
    stats = RunningStats(2)
    gamma = Tensor(np.ones((1, 2, 1, 1)))
    beta = Tensor(np.zeros((1, 2, 1, 1)))
    batch_norm2d(x, gamma, beta, stats, training=True)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    assert_close(stats.mean, 0.1 * batch_mean, 1e-12)
    # inference uses the running statistics, not the batch's
    y = batch_norm2d(x, gamma, beta, stats, training=False)
    expect = (x.data - stats.mean.reshape(1, 2, 1, 1)) / np.sqrt(
        stats.var.reshape(1, 2, 1, 1) + 1e-5
    )
    assert_close(y.data, expect, 1e-12)


def test_batch_norm_rejects_degenerate_batch(rng):
    # a single reduction element per channel leaves the variance undefined
    x = Tensor(rng.standard_normal((1, 2, 1, 1)))
    stats = RunningStats(2)
    gamma = Tensor(np.ones((1, 2, 1, 1)))
    beta = Tensor(np.zeros((1, 2, 1, 1)))
    with pytest.raises(ContractError):
        batch_norm2d(x, gamma, beta, stats, training=True)


def test_bilinear_upsample_gradients(rng):
    x = _tensor(rng, (1, 2, 3, 3))
    _check_op(bilinear_upsample2x, [x])


def test_bilinear_upsample_constant_preserved():
    x = Tensor(np.full((1, 1, 4, 4), 3.25))
    out = bilinear_upsample2x(x)
    assert out.shape == (1, 1, 8, 8)
    assert_close(out.data, 3.25, 1e-12)


def test_backward_accumulates_on_second_call(rng):
    a = _tensor(rng, (1, 1, 2, 2))
    with Tape() as tape:
        loss = mean_all(mul_elementwise(a, a))
    backward(tape, loss)
    first = a.grad.copy()
    backward(tape, loss)
    assert_close(a.grad, 2 * first, 1e-12)


def test_backward_zero_fills_unreached_tensors(rng):
    a = _tensor(rng, (1, 1, 2, 2))
    b = _tensor(rng, (1, 1, 2, 2))
    with Tape() as tape:
        _unused = mul_elementwise(b, b)
        loss = mean_all(a)
    backward(tape, loss)
    assert b.grad is not None
    assert np.all(b.grad == 0.0)


def test_backward_rejects_off_tape_loss(rng):
    a = _tensor(rng, (1, 1, 1, 1))
    with Tape() as tape:
        pass
    loss = mean_all(a)  # built outside any tape
    with pytest.raises(ContractError):
        backward(tape, loss)


def test_backward_rejects_non_scalar(rng):
    a = _tensor(rng, (1, 1, 2, 2))
    with Tape() as tape:
        out = mul_elementwise(a, a)
    with pytest.raises(ContractError):
        backward(tape, out)


def test_ops_off_tape_do_not_record(rng):
    a = _tensor(rng, (1, 1, 2, 2))
    out = mul_elementwise(a, a)  # no tape active
    assert out.requires_grad
    with Tape() as tape:
        pass
    assert not tape.nodes


def test_custom_op_backward_hook(rng):
    a = _tensor(rng, (1, 1, 2, 2))
    calls = []

    def bwd(g):
        calls.append(g.copy())
        return (3.0 * g,)

    with Tape() as tape:
        out = custom_op("triple", [a], 3.0 * a.data, bwd)
        loss = mean_all(out)
    backward(tape, loss)
    assert len(calls) == 1
    assert_close(a.grad, np.full(a.data.shape, 3.0 / a.data.size), 1e-12)


def test_tensor_validates_rank():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 3)))


def test_scalar_helper():
    s = scalar(4.5)
    assert s.shape == (1, 1, 1, 1)
    assert s.item() == 4.5
