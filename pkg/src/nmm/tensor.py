"""Minimal dense tensor with reverse-mode differentiation.

Activations are rank-3 arrays laid out as (batch, channels, time). Every op
below returns a new :class:`Tensor` that remembers its inputs and a closure
mapping the output gradient to input gradients; :meth:`Tensor.backward`
walks that graph in reverse topological order.

Values default to float32. Ops preserve the dtype of their inputs, so
float64 tensors can be used where finite-difference checks need the extra
precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "Tensor",
    "ConvSpec",
    "make_rng",
    "conv1d",
    "batchnorm1d",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "channel_scale",
    "global_avg_pool_time",
    "log_softmax",
    "dropout",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def make_rng(seed):
    """Deterministic generator used everywhere in the package (numpy PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) * grad into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ConfigError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ConfigError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root):
    # Iterative DFS; parent order is fixed by each op, so the order (and hence
    # gradient accumulation order) does not depend on how the graph was built.
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _check_rank3(x, what):
    if x.data.ndim != 3:
        raise ConfigError(f"{what} expects a (batch, channels, time) tensor, got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    """Shape description of a 1D convolution with symmetric "same" padding."""

    in_channels: int
    out_channels: int
    kernel_size: int = 1
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1", "conv.channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}", "conv.kernel_size")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}", "conv.stride")
        if self.groups not in (1, self.in_channels):
            raise ConfigError(f"groups must be 1 or in_channels, got {self.groups}", "conv.groups")
        if self.groups != 1 and self.out_channels != self.in_channels:
            raise ConfigError("depthwise conv requires out_channels == in_channels", "conv.out_channels")

    @property
    def depthwise(self):
        return self.groups == self.in_channels and self.groups != 1

    @property
    def padding(self):
        return (self.kernel_size - 1) // 2

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel_size)

    def out_length(self, t):
        return -(-t // self.stride)

    def flops(self, t_in):
        """Multiply-adds x2 for one batch item of length ``t_in``."""
        macs = self.out_channels * (self.in_channels // self.groups) * self.kernel_size
        return 2 * macs * self.out_length(t_in)


def conv1d(x, weight, spec, bias=None):
    """1D convolution, zero "same" padding; output length ceil(T / stride)."""
    _check_rank3(x, "conv1d")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"conv1d input shape {x.shape} does not match in_channels={spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ConfigError(f"conv1d weight shape {weight.shape} does not match expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigError(f"conv1d bias shape {bias.shape} does not match ({spec.out_channels},)")

    b, _, t = x.shape
    k, s, pad = spec.kernel_size, spec.stride, spec.padding
    t_out = spec.out_length(t)
    w = weight.data
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    span = s * (t_out - 1) + 1

    if spec.depthwise:
        out = np.zeros((b, spec.out_channels, t_out), dtype=x.dtype)
        for j in range(k):
            out += w[None, :, 0, j, None] * xp[:, :, j:j + span:s]
    elif k == 1 and s == 1:
        out = np.matmul(w[:, :, 0], x.data)
    else:
        out = np.zeros((b, spec.out_channels, t_out), dtype=x.dtype)
        for j in range(k):
            out += np.matmul(w[:, :, j], xp[:, :, j:j + span:s])
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if weight.requires_grad else None
        if spec.depthwise:
            for j in range(k):
                win = slice(j, j + span, s)
                if gxp is not None:
                    gxp[:, :, win] += g * w[None, :, 0, j, None]
                if gw is not None:
                    gw[:, 0, j] = np.einsum("bct,bct->c", g, xp[:, :, win])
        elif k == 1 and s == 1:
            if gxp is not None:
                gxp = np.matmul(w[:, :, 0].T, g)
            if gw is not None:
                gw[:, :, 0] = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
        else:
            for j in range(k):
                win = slice(j, j + span, s)
                if gxp is not None:
                    gxp[:, :, win] += np.matmul(w[:, :, j].T, g)
                if gw is not None:
                    gw[:, :, j] = np.tensordot(g, xp[:, :, win], axes=([0, 2], [0, 2]))
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad:pad + t] if pad else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def batchnorm1d(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation over (batch, time).

    In training mode the batch statistics are used and the running arrays are
    updated in place (unbiased variance, as is customary); in eval mode the
    running statistics are used as constants.
    """
    _check_rank3(x, "batchnorm1d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batchnorm1d params {gamma.shape}/{beta.shape} do not match channels of {x.shape}")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        n = xd.shape[0] * xd.shape[2]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None]) * inv_std[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        ggamma = np.einsum("bct,bct->c", g, xhat) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                m = g.shape[0] * g.shape[2]
                gx = (inv_std[None, :, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2))[None, :, None]
                    - xhat * np.einsum("bct,bct->c", gxhat, xhat)[None, :, None]
                )
            else:
                gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    # exp of a non-positive argument only, so large |x| never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def _broadcast_ok(big, small):
    return small == big or (len(small) == 3 and small[:2] == big[:2] and small[2] == 1)


def add(x, y):
    """Elementwise sum; either side may be (B, C, 1) and is broadcast over time."""
    if x.shape != y.shape:
        if not (_broadcast_ok(x.shape, y.shape) or _broadcast_ok(y.shape, x.shape)):
            raise ConfigError(f"add: incompatible shapes {x.shape} and {y.shape}")
    out = x.data + y.data

    def reduce_to(g, shape):
        return g.sum(axis=2, keepdims=True) if g.shape != shape else g

    return _result(out, (x, y), lambda g: (reduce_to(g, x.shape), reduce_to(g, y.shape)))


def scale(x, s):
    s = float(s)
    return _result(x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),))


def channel_scale(x, gate):
    """Multiply a (B, C, T) tensor by a per-channel (B, C, 1) gate."""
    _check_rank3(x, "channel_scale")
    if gate.shape != (x.shape[0], x.shape[1], 1):
        raise ConfigError(f"channel_scale: gate shape {gate.shape} does not match {x.shape}")
    out = x.data * gate.data

    def backward(g):
        return g * gate.data, (g * x.data).sum(axis=2, keepdims=True)

    return _result(out, (x, gate), backward)


def global_avg_pool_time(x):
    _check_rank3(x, "global_avg_pool_time")
    t = x.shape[2]
    out = x.data.mean(axis=2, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / t, x.shape).copy(),))


def log_softmax(x):
    """Log-softmax over the channel axis with max subtraction."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), backward)


def dropout(x, p, rng=None, training=True):
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}", "dropout_p")
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1 / (1 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))
