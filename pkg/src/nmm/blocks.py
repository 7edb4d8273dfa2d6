"""Network blocks: separable-conv units, residual blocks, SE gates, downsampling,
prologue and epilogue.

Blocks are plain functions over a :class:`Scope`, a view on the flat
parameter/buffer dictionaries under a name prefix. Every block also has a
``*_shapes`` companion that enumerates the parameters it reads; the model
initialiser and the parameter counter are both built from these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import ConvSpec

SE_REDUCTION = 8


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    kernel_size: int
    repeats: int = 1
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("must be >= 1", "C")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"must be odd and >= 1, got {self.kernel_size}", "k")
        if self.repeats < 1:
            raise ConfigError("must be >= 1", "R")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"must be in [0, 1), got {self.dropout_p}", "dropout_p")


@dataclass(frozen=True)
class SeConfig:
    channels: int
    reduction: int = SE_REDUCTION

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("must be >= 1", "C")
        if self.reduction < 1:
            raise ConfigError("must be >= 1", "se_reduction")

    @property
    def bottleneck(self):
        return max(1, self.channels // self.reduction)


@dataclass
class Scope:
    """Parameters and buffers under a common name prefix.

    ``training`` selects batch statistics and active dropout; ``rng`` feeds
    dropout and is only required in training mode.
    """

    params: dict
    buffers: dict
    prefix: str = ""
    training: bool = False
    rng: np.random.Generator | None = None
    bypass_se: bool = False

    def __getitem__(self, name):
        return self.params[self.prefix + name]

    def buffer(self, name):
        return self.buffers[self.prefix + name]

    def child(self, name, rng=None):
        return Scope(self.params, self.buffers, f"{self.prefix}{name}.", self.training,
                     self.rng if rng is None else rng, self.bypass_se)


# --- parameter layouts -------------------------------------------------------
# Each *_shapes function yields (name, shape, kind) with kind one of
# "weight", "bias", "gamma", "beta", "buffer_mean", "buffer_var".

def conv_shapes(prefix, spec, bias=False):
    yield prefix + "weight", spec.weight_shape, "weight"
    if bias:
        yield prefix + "bias", (spec.out_channels,), "bias"


def bn_shapes(prefix, channels):
    yield prefix + "gamma", (channels,), "gamma"
    yield prefix + "beta", (channels,), "beta"
    yield prefix + "running_mean", (channels,), "buffer_mean"
    yield prefix + "running_var", (channels,), "buffer_var"


def unit_specs(c_in, c_out, k, stride=1):
    dw = ConvSpec(c_in, c_in, k, stride, groups=c_in)
    pw = ConvSpec(c_in, c_out, 1)
    return dw, pw


def unit_shapes(prefix, c_in, c_out, k, stride=1):
    dw, pw = unit_specs(c_in, c_out, k, stride)
    yield from conv_shapes(prefix + "dw.", dw)
    yield from conv_shapes(prefix + "pw.", pw)
    yield from bn_shapes(prefix + "bn.", c_out)


def quartz_block_shapes(prefix, cfg):
    c = cfg.channels
    yield from unit_shapes(prefix, c, c, cfg.kernel_size)
    yield from conv_shapes(prefix + "res_pw.", ConvSpec(c, c, 1))
    yield from bn_shapes(prefix + "res_bn.", c)


def se_shapes(prefix, cfg):
    c, h = cfg.channels, cfg.bottleneck
    yield from conv_shapes(prefix + "fc1.", ConvSpec(c, h, 1), bias=True)
    yield from conv_shapes(prefix + "fc2.", ConvSpec(h, c, 1), bias=True)


def tower_shapes(prefix, cfg, se_cfg):
    for r in range(cfg.repeats):
        yield from quartz_block_shapes(f"{prefix}block{r}.", cfg)
    yield from se_shapes(prefix + "se.", se_cfg)


def downsample_shapes(prefix, c_in, c_out, k):
    yield from unit_shapes(prefix + "u0.", c_in, c_out, k)
    yield from unit_shapes(prefix + "u1.", c_out, c_out, k, stride=2)


def prologue_shapes(prefix, feature_dim, channels, k):
    yield from unit_shapes(prefix, feature_dim, channels, k, stride=2)


def epilogue_kernel(k):
    return 2 * k - 1


def epilogue_shapes(prefix, channels, k, vocab):
    yield from unit_shapes(prefix + "u.", channels, channels, epilogue_kernel(k))
    yield from conv_shapes(prefix + "out.", ConvSpec(channels, vocab + 1, 1), bias=True)


def init_array(shape, kind, rng):
    """Fan-in scaled uniform init for weights; BN gamma 1, everything else 0."""
    if kind == "weight":
        fan_in = shape[1] * shape[2]
        bound = np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)
    if kind in ("gamma", "buffer_var"):
        return np.ones(shape, dtype=np.float32)
    return np.zeros(shape, dtype=np.float32)


# --- forward functions -------------------------------------------------------

def batchnorm(x, scope):
    return T.batchnorm1d(x, scope["gamma"], scope["beta"], scope.buffer("running_mean"),
                         scope.buffer("running_var"), scope.training)


def separable_unit(x, scope, c_out, k, stride=1, dropout_p=0.0, residual=None):
    """depthwise(k, stride) -> pointwise -> BN [-> + residual] -> ReLU -> dropout."""
    dw, pw = unit_specs(x.shape[1], c_out, k, stride)
    y = T.conv1d(x, scope["dw.weight"], dw)
    y = T.conv1d(y, scope["pw.weight"], pw)
    y = batchnorm(y, scope.child("bn"))
    if residual is not None:
        y = T.add(y, residual)
    y = T.relu(y)
    return T.dropout(y, dropout_p, scope.rng, scope.training)


def quartz_block(x, scope, cfg):
    """One residual block; the pointwise+BN residual joins before the activation."""
    if x.shape[1] != cfg.channels:
        raise ConfigError(f"quartz_block input {x.shape} does not have {cfg.channels} channels")
    c = cfg.channels
    res = T.conv1d(x, scope["res_pw.weight"], ConvSpec(c, c, 1))
    res = batchnorm(res, scope.child("res_bn"))
    return separable_unit(x, scope, c, cfg.kernel_size, dropout_p=cfg.dropout_p, residual=res)


def se_module(x, scope, cfg):
    if x.shape[1] != cfg.channels:
        raise ConfigError(f"se_module input {x.shape} does not have {cfg.channels} channels")
    c, h = cfg.channels, cfg.bottleneck
    s = T.global_avg_pool_time(x)
    s = T.conv1d(s, scope["fc1.weight"], ConvSpec(c, h, 1), scope["fc1.bias"])
    s = T.relu(s)
    s = T.conv1d(s, scope["fc2.weight"], ConvSpec(h, c, 1), scope["fc2.bias"])
    return T.channel_scale(x, T.sigmoid(s))


def tower(x, scope, cfg, se_cfg):
    for r in range(cfg.repeats):
        x = quartz_block(x, scope.child(f"block{r}"), cfg)
    if scope.bypass_se:
        return x
    return se_module(x, scope.child("se"), se_cfg)


def downsample_block(x, scope, c_out, k, dropout_p=0.0):
    """Two separable units, the second with stride 2: T -> ceil(T / 2)."""
    x = separable_unit(x, scope.child("u0"), c_out, k, dropout_p=dropout_p)
    return separable_unit(x, scope.child("u1"), c_out, k, stride=2, dropout_p=dropout_p)


def prologue(features, scope, channels, k, dropout_p=0.0):
    return separable_unit(features, scope, channels, k, stride=2, dropout_p=dropout_p)


def epilogue(x, scope, vocab, k, dropout_p=0.0):
    """Separable unit with kernel 2k-1, projection to vocab+1, log-softmax."""
    c = x.shape[1]
    x = separable_unit(x, scope.child("u"), c, epilogue_kernel(k), dropout_p=dropout_p)
    x = T.conv1d(x, scope["out.weight"], ConvSpec(c, vocab + 1, 1), scope["out.bias"])
    return T.log_softmax(x)


# --- receptive field -----------------------------------------------------------

@dataclass
class _RfTracker:
    jump: int = 1
    rf: int = 1

    def conv(self, k, stride=1):
        self.rf += (k - 1) * self.jump
        self.jump *= stride


def receptive_field(cfg):
    """Local receptive field, in input frames, of one output frame.

    Sums (k - 1) * (product of earlier strides) over the depthwise convs on
    the longest path: prologue, each downsample block, R blocks of one tower
    and the epilogue. Pointwise convs add nothing. The SE gate pools over
    the whole sequence and is deliberately left out.
    """
    k = cfg.kernel_size
    rf = _RfTracker()
    rf.conv(k, 2)
    for _ in cfg.towers:
        rf.conv(k)
        rf.conv(k, 2)
        for _ in range(cfg.repeats):
            rf.conv(k)
    rf.conv(epilogue_kernel(k))
    return rf.rf


def total_stride(cfg):
    return 2 ** (1 + len(cfg.towers))
