"""Minimal reverse-mode automatic differentiation over 4-D tensors.

Tensors are dense float64 arrays of shape (batch, channels, height,
width); scalars use shape (1, 1, 1, 1). Operations executed while a
Tape is active record backward closures on it; backward() replays the
tape in reverse. The op set is exactly what the decomposition network
and its losses need, nothing more.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from intrinsic import _kernels
from intrinsic.errors import ConfigError, ContractError, DimensionError

_uid_counter = itertools.count()

_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """A 4-D float64 value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(
                f"Tensor data must be 4-D (batch, channels, height, width), got ndim={arr.ndim}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.uid = next(_uid_counter)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward):
        self.nodes.append(_Node(op, tuple(inputs), output, backward))


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Wrap a forward result, recording the node when gradients are needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(op, inputs, out, backward)
    return out


def custom_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Hook for layers with hand-written backward passes.

    ``backward`` receives the upstream gradient of the output and must
    return one gradient array (or None) per input, in order.
    """
    return _emit(op, inputs, out_data, backward)


def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(
                    f"{op}: operand shapes {a.shape} and {b.shape} differ on axis {axis}"
                )


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul_elementwise", a, b)
    ad, bd = a.data, b.data
    return _emit("mul_elementwise", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def mul_broadcast_channel(a: Tensor, s: Tensor) -> Tensor:
    """Per-pixel product of a multi-channel map with a 1-channel map."""
    if s.shape[1] != 1:
        raise DimensionError(
            f"mul_broadcast_channel: second operand must have 1 channel, got {s.shape[1]}"
        )
    for axis in (0, 2, 3):
        if a.shape[axis] != s.shape[axis]:
            raise DimensionError(
                f"mul_broadcast_channel: operand shapes {a.shape} and {s.shape} "
                f"differ on axis {axis}"
            )
    ad, sd = a.data, s.data

    def backward(g):
        return g * sd, (g * ad).sum(axis=1, keepdims=True)

    return _emit("mul_broadcast_channel", (a, s), ad * sd, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"concat_channels: operand shapes {a.shape} and {b.shape} "
                f"differ on axis {axis}"
            )
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _emit("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=1), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape

    def backward(g):
        return (np.full(shape, g.reshape(()) / n),)

    return _emit("mean_all", (a,), np.full((1, 1, 1, 1), a.data.mean()), backward)


def scale(a: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or per-item (B,1,1,1) array.

    The factor is held fixed: no gradient flows through it.
    """
    f = np.asarray(factor, dtype=np.float64)
    if f.ndim not in (0, 4):
        raise DimensionError(f"scale: factor must be scalar or 4-D, got ndim={f.ndim}")
    return _emit("scale", (a,), a.data * f, lambda g: (g * f,))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D correlation with zero padding, NCHW layout, (O,C,kh,kw) weights."""
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"conv2d: padding must be >= 0, got {padding}")
    ocount, cin, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels on axis 1, weight expects {cin}"
        )
    if bias is not None and bias.shape != (1, ocount, 1, 1):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} does not match (1, {ocount}, 1, 1)"
        )
    n, _, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    out = _kernels.conv2d_forward(xp, weight.data, stride)
    if bias is not None:
        out = out + bias.data
    hp, wp = xp.shape[2], xp.shape[3]
    wdata = weight.data

    def backward(g):
        gw = _kernels.conv2d_grad_weight(g, xp, stride, kh, kw)
        gxp = _kernels.conv2d_grad_input_padded(g, wdata, stride, hp, wp)
        if padding:
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding]
        else:
            gx = gxp
        if bias is None:
            return gx, gw, None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, ocount, 1, 1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, backward)


class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    c = x.shape[1]
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise DimensionError(
            f"batch_norm2d: gamma/beta must be (1, {c}, 1, 1), got {gamma.shape} and {beta.shape}"
        )
    if running.channels != c:
        raise DimensionError(
            f"batch_norm2d: running stats track {running.channels} channels, input has {c}"
        )
    n, _, h, w = x.shape
    m = n * h * w
    gdata, bdata = gamma.data, beta.data
    if training:
        if m < 2:
            raise ContractError(
                "batch_norm2d: train mode needs batch*height*width >= 2 "
                "(variance is degenerate for a single element)"
            )
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean += momentum * (mu - running.mean)
        running.var += momentum * (var - running.var)
    else:
        mu = running.mean
        var = running.var
    ivar = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
    out = gdata * xhat + bdata

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gbeta = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gxhat = g * gdata
        iv = ivar.reshape(1, c, 1, 1)
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (iv / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * iv
        return gx, ggamma, gbeta

    return _emit("batch_norm2d", (x, gamma, beta), out, backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        # np.maximum (not where) so NaN propagates to divergence checks
        return _emit("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))
    if kind == "softplus":
        xd = x.data
        out = np.where(xd > 30.0, xd, np.log1p(np.exp(np.minimum(xd, 30.0))))
        sig = expit(xd)
        return _emit("softplus", (x,), out, lambda g: (g * sig,))
    raise ConfigError(f"activation: kind must be 'relu' or 'softplus', got {kind!r}")


_upsample_matrices: dict[int, np.ndarray] = {}


def _upsample_matrix(size: int) -> np.ndarray:
    """Interpolation weights mapping ``size`` samples to ``2*size``.

    Output sample o reads source coordinate (o + 0.5)/2 - 0.5 with
    edge-clamped neighbors (align-corners = false).
    """
    cached = _upsample_matrices.get(size)
    if cached is not None:
        return cached
    mat = np.zeros((2 * size, size), dtype=np.float64)
    for o in range(2 * size):
        s = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(s))
        frac = s - i0
        lo = min(max(i0, 0), size - 1)
        hi = min(max(i0 + 1, 0), size - 1)
        mat[o, lo] += 1.0 - frac
        mat[o, hi] += frac
    _upsample_matrices[size] = mat
    return mat


def bilinear_upsample2x(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    ar = _upsample_matrix(h)
    ac = _upsample_matrix(w)
    out = np.einsum("oh,nchw,pw->ncop", ar, x.data, ac, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", ar, g, ac, optimize=True),)

    return _emit("bilinear_upsample2x", (x,), out, backward)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor recorded on the tape.

    Gradients accumulate: calling backward twice without clearing grads
    doubles them. Tensors on the tape that the loss does not reach get
    zeros added, so their grads always exist afterwards.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward: loss must be scalar (1,1,1,1), got {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise ContractError("backward: loss was not produced on this tape")

    adjoint: dict[int, np.ndarray] = {loss.uid: np.ones((1, 1, 1, 1))}
    for node in reversed(tape.nodes):
        g = adjoint.get(node.output.uid)
        if g is None:
            continue
        grads = node.backward(g)
        for tensor, gin in zip(node.inputs, grads):
            if gin is None or not tensor.requires_grad:
                continue
            have = adjoint.get(tensor.uid)
            adjoint[tensor.uid] = gin if have is None else have + gin

    seen: dict[int, Tensor] = {}
    for node in tape.nodes:
        seen[node.output.uid] = node.output
        for tensor in node.inputs:
            seen[tensor.uid] = tensor
    for uid, tensor in seen.items():
        if not tensor.requires_grad:
            continue
        g = adjoint.get(uid)
        if g is None:
            g = np.zeros(tensor.shape)
        if tensor.grad is None:
            tensor.grad = g.copy()
        else:
            tensor.grad += g
