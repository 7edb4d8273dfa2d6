"""Mega-blocks of parallel towers, tower dropout and inference-time reconfiguration.

A mega-block downsamples its input once, feeds the result to N independent
towers and sums the tower outputs. During training each tower output is
kept with probability ``1 - tower_dropout_p`` and survivors are scaled by
the inverse keep probability. At inference a :class:`TowerMask` selects
the towers to run; their outputs are weighted according to an
:class:`AggregationMode`.

Summation always runs in ascending tower order, so executing the towers on
a thread pool gives bit-identical results to running them one by one.
"""

from __future__ import annotations

import enum
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor, make_rng


class AggregationMode(enum.Enum):
    TRAIN_SUM = "train"
    RESCALED = "rescaled"  # w_i = N * delta_i / K
    PAPER_LITERAL = "paper-literal"  # w_i = delta_i / K
    UNSCALED = "unscaled"  # w_i = delta_i

    @property
    def training(self):
        return self is AggregationMode.TRAIN_SUM


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    repeats: int = 2
    kernel_size: int = 11
    towers: tuple = (5, 6, 7)
    feature_dim: int = 80
    vocab_size: int = 28
    tower_dropout_p: float = 0.0
    dropout_p: float = 0.1
    se_reduction: int = B.SE_REDUCTION

    def __post_init__(self):
        object.__setattr__(self, "towers", tuple(int(n) for n in self.towers))
        checks = [
            ("C", self.channels >= 1, "must be >= 1"),
            ("R", self.repeats >= 1, "must be >= 1"),
            ("k", self.kernel_size >= 1 and self.kernel_size % 2 == 1, "must be odd and >= 1"),
            ("towers", len(self.towers) >= 1, "need at least one mega-block"),
            ("towers", all(n >= 1 for n in self.towers), "every mega-block needs >= 1 tower"),
            ("feature_dim", self.feature_dim >= 1, "must be >= 1"),
            ("vocab", self.vocab_size >= 1, "must be >= 1"),
            ("tower_dropout_p", 0 <= self.tower_dropout_p < 1, "must be in [0, 1)"),
            ("dropout_p", 0 <= self.dropout_p < 1, "must be in [0, 1)"),
            ("se_reduction", self.se_reduction >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg}, got {getattr(self, _FIELD_ATTR.get(name, name))!r}", name)

    @property
    def block(self):
        return B.BlockConfig(self.channels, self.kernel_size, self.repeats, self.dropout_p)

    @property
    def se(self):
        return B.SeConfig(self.channels, self.se_reduction)


_FIELD_ATTR = {"C": "channels", "R": "repeats", "k": "kernel_size", "vocab": "vocab_size"}


@dataclass(frozen=True)
class TowerMask:
    """Per mega-block boolean tower selection; every mega-block keeps >= 1 tower."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(tuple(bool(b) for b in mb) for mb in self.bits)
        object.__setattr__(self, "bits", bits)
        for i, mb in enumerate(bits, 1):
            if not any(mb):
                raise ConfigError(f"mb{i}: at least one tower required", "mask")

    @classmethod
    def full(cls, towers):
        return cls(tuple((True,) * n for n in towers))

    @classmethod
    def parse(cls, text, towers):
        """Parse ``mb1=11011,mb2=111111``; mega-blocks not mentioned keep all towers."""
        bits = [[True] * n for n in towers]
        seen = set()
        text = (text or "").strip()
        for item in filter(None, (s.strip() for s in text.split(","))):
            m = re.fullmatch(r"mb(\d+)=([01]+)", item)
            if m is None:
                raise ConfigError(f"cannot parse {item!r}, expected mb<idx>=<bits>", "mask")
            idx = int(m.group(1))
            if not 1 <= idx <= len(towers):
                raise ConfigError(f"mega-block index {idx} out of range 1..{len(towers)}", "mask")
            if idx in seen:
                raise ConfigError(f"mb{idx} given twice", "mask")
            seen.add(idx)
            if len(m.group(2)) != towers[idx - 1]:
                raise ConfigError(f"mb{idx} has {towers[idx - 1]} towers but {len(m.group(2))} bits were given", "mask")
            bits[idx - 1] = [c == "1" for c in m.group(2)]
        return cls(tuple(tuple(b) for b in bits))

    def __str__(self):
        return ",".join(f"mb{i}=" + "".join("1" if b else "0" for b in mb) for i, mb in enumerate(self.bits, 1))

    @property
    def kept(self):
        return tuple(sum(mb) for mb in self.bits)

    def check(self, towers):
        if tuple(len(mb) for mb in self.bits) != tuple(towers):
            raise ConfigError(f"mask {self} does not match towers {list(towers)}", "mask")
        return self


def inference_weights(bits, mode):
    n, k = len(bits), sum(bits)
    if k == 0:
        raise ConfigError("at least one tower required", "mask")
    w = {AggregationMode.RESCALED: n / k, AggregationMode.PAPER_LITERAL: 1 / k,
         AggregationMode.UNSCALED: 1.0}[mode]
    return [w if b else 0.0 for b in bits]


def sample_tower_weights(n, tower_dropout_p, rng):
    """Bernoulli keep / keep-probability; an all-dropped draw is redrawn."""
    p_keep = 1.0 - tower_dropout_p
    while True:
        keep = rng.random(n) < p_keep
        if keep.any():
            return [1.0 / p_keep if k else 0.0 for k in keep]


def megablock_forward(x, scope, cfg, n_towers, mode, bits=None, rng=None, executor=None):
    """Downsample once, run the active towers on the shared input, weighted sum."""
    if mode.training:
        if rng is None:
            raise ConfigError("training aggregation needs an rng")
        weights = sample_tower_weights(n_towers, cfg.tower_dropout_p, rng)
    else:
        if bits is None:
            raise ConfigError("inference aggregation needs a mask")
        weights = inference_weights(bits, mode)
    # one child generator per tower, drawn up front so dropout inside towers
    # does not depend on the execution schedule
    tower_rngs = [make_rng(int(s)) for s in rng.integers(0, 2**63, size=n_towers)] if rng is not None else [None] * n_towers

    x = B.downsample_block(x, scope.child("down"), cfg.channels, cfg.kernel_size, cfg.dropout_p)
    active = [i for i, w in enumerate(weights) if w != 0.0]

    def run(i):
        return B.tower(x, scope.child(f"tower{i}", tower_rngs[i]), cfg.block, cfg.se)

    if executor is not None and len(active) > 1:
        outputs = list(executor.map(run, active))
    else:
        outputs = [run(i) for i in active]

    total = None
    for i, out in zip(active, outputs):
        if weights[i] != 1.0:
            out = T.scale(out, weights[i])
        total = out if total is None else T.add(total, out)
    return total


def model_forward(features, model, mode=AggregationMode.RESCALED, mask=None, rng=None,
                  threads=1, bypass_se=False, grad=None, executor=None):
    """prologue -> mega-blocks -> epilogue; returns (B, V+1, ceil(T/16)) log-probs."""
    cfg = model.cfg
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.data.ndim != 3 or features.shape[1] != cfg.feature_dim:
        raise ConfigError(f"features shape {features.shape} does not match feature_dim={cfg.feature_dim}")
    if mode.training and rng is None:
        raise ConfigError("training forward needs an rng")
    if mask is None:
        mask = TowerMask.full(cfg.towers)
    mask.check(cfg.towers)
    if grad is None:
        grad = mode.training
    params = model.params if grad else {k: p.detach() for k, p in model.params.items()}
    scope = B.Scope(params, model.buffers, training=mode.training, rng=rng, bypass_se=bypass_se)

    own_pool = None
    if executor is None and threads > 1:
        executor = own_pool = ThreadPoolExecutor(max_workers=threads)
    try:
        x = B.prologue(features, scope.child("prologue"), cfg.channels, cfg.kernel_size, cfg.dropout_p)
        for i, n in enumerate(cfg.towers):
            x = megablock_forward(x, scope.child(f"mb{i + 1}"), cfg, n, mode, mask.bits[i], rng, executor)
        return B.epilogue(x, scope.child("epilogue"), cfg.vocab_size, cfg.kernel_size, cfg.dropout_p)
    finally:
        if own_pool is not None:
            own_pool.shutdown()


# --- parameter layout and accounting -----------------------------------------

def parameter_layout(cfg):
    """Ordered (name, shape, kind) for every parameter and buffer of the model."""
    k, c = cfg.kernel_size, cfg.channels
    yield from B.prologue_shapes("prologue.", cfg.feature_dim, c, k)
    for i, n in enumerate(cfg.towers, 1):
        yield from B.downsample_shapes(f"mb{i}.down.", c, c, k)
        for t in range(n):
            yield from B.tower_shapes(f"mb{i}.tower{t}.", cfg.block, cfg.se)
    yield from B.epilogue_shapes("epilogue.", c, k, cfg.vocab_size)


_TOWER_RE = re.compile(r"mb(\d+)\.tower(\d+)\.")


def tower_of(name):
    """(mega-block index starting at 1, tower index) for tower parameters, else None."""
    m = _TOWER_RE.match(name)
    return (int(m.group(1)), int(m.group(2))) if m else None


def _masked_out(name, mask):
    loc = tower_of(name)
    return loc is not None and mask is not None and not mask.bits[loc[0] - 1][loc[1]]


def param_breakdown(cfg, mask=None):
    """Trainable parameter counts grouped as prologue / mbI.down / mbI.towers / epilogue."""
    out = {}
    for name, shape, kind in parameter_layout(cfg):
        if kind.startswith("buffer") or _masked_out(name, mask):
            continue
        group = name.split(".")[0]
        if group.startswith("mb"):
            group += ".towers" if tower_of(name) else ".down"
        out[group] = out.get(group, 0) + int(np.prod(shape))
    return out


def param_count(cfg, mask=None):
    if isinstance(cfg, (Model, MaskedModel)):
        mask = getattr(cfg, "mask", mask)
        cfg = cfg.cfg
    return sum(param_breakdown(cfg, mask).values())


def _unit_flops(c_in, c_out, k, t_in, stride=1):
    dw, pw = B.unit_specs(c_in, c_out, k, stride)
    t_out = dw.out_length(t_in)
    # convs, BN scale+shift, ReLU
    return dw.flops(t_in) + pw.flops(t_out) + 3 * c_out * t_out, t_out


def flop_breakdown(cfg, t, mask=None):
    """Inference FLOPs for one sequence of ``t`` input frames, grouped like
    :func:`param_breakdown` plus ``mbI.aggregate``.

    Convolutions count 2 per multiply-add (plus 1 per bias add); BN counts 2
    per element; ReLU, residual add, sigmoid and gating count 1 per element.
    Aggregation counts one multiply per active tower plus K-1 adds per
    element. Log-softmax counts 3 per element.
    """
    if mask is None:
        mask = TowerMask.full(cfg.towers)
    mask.check(cfg.towers)
    c, k = cfg.channels, cfg.kernel_size
    out = {}
    out["prologue"], t = _unit_flops(cfg.feature_dim, c, k, t, stride=2)
    se = cfg.se
    for i, n in enumerate(cfg.towers, 1):
        f0, t = _unit_flops(c, c, k, t)
        f1, t = _unit_flops(c, c, k, t, stride=2)
        out[f"mb{i}.down"] = f0 + f1
        block = _unit_flops(c, c, k, t)[0] + 2 * c * c * t + 2 * c * t + c * t
        h = se.bottleneck
        # pool, fc1 + bias, relu, fc2 + bias, sigmoid, gating
        se_flops = (c * t + c) + (2 * c * h + h) + h + (2 * h * c + c) + c + c * t
        kept = sum(mask.bits[i - 1])
        out[f"mb{i}.towers"] = kept * (cfg.repeats * block + se_flops)
        out[f"mb{i}.aggregate"] = (2 * kept - 1) * c * t
    v = cfg.vocab_size + 1
    f_epi, t = _unit_flops(c, c, B.epilogue_kernel(k), t)
    out["epilogue"] = f_epi + 2 * c * v * t + v * t + 3 * v * t
    return out


def flop_count(cfg, t, mask=None):
    if isinstance(cfg, (Model, MaskedModel)):
        mask = getattr(cfg, "mask", mask)
        cfg = cfg.cfg
    return sum(flop_breakdown(cfg, t, mask).values())


# --- model containers --------------------------------------------------------

class Model:
    """Configuration plus named parameters (leaf tensors) and BN buffers."""

    def __init__(self, cfg, params=None, buffers=None, seed=0):
        self.cfg = cfg
        layout = list(parameter_layout(cfg))
        if params is None:
            rng = make_rng(seed)
            arrays = {name: B.init_array(shape, kind, rng) for name, shape, kind in layout}
            params = {n: a for n, a in arrays.items() if not n.endswith(("running_mean", "running_var"))}
            buffers = {n: a for n, a in arrays.items() if n.endswith(("running_mean", "running_var"))}
        expected = {name: tuple(shape) for name, shape, _ in layout}
        given = {**params, **(buffers or {})}
        if set(given) != set(expected):
            missing = sorted(set(expected) - set(given))
            extra = sorted(set(given) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, arr in given.items():
            if tuple(np.shape(arr)) != expected[name]:
                raise ConfigError(f"{name}: shape {np.shape(arr)} does not match expected {expected[name]}")
        self.params = {n: Tensor(np.array(params[n], copy=True), requires_grad=True) for n in expected if n in params}
        self.buffers = {n: np.array(buffers[n], copy=True) for n in expected if n in buffers}

    def forward(self, features, mode=AggregationMode.RESCALED, mask=None, rng=None, **kw):
        return model_forward(features, self, mode, mask, rng, **kw)

    __call__ = forward

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        """Copies of all parameters and buffers as plain arrays."""
        return ({n: p.data.copy() for n, p in self.params.items()},
                {n: b.copy() for n, b in self.buffers.items()})

    def astype(self, dtype):
        """New model with parameters and buffers cast to ``dtype``."""
        params, buffers = self.state()
        m = Model(self.cfg, params, buffers)
        for p in m.params.values():
            p.data = p.data.astype(dtype)
        for n in m.buffers:
            m.buffers[n] = m.buffers[n].astype(dtype)
        return m

    def tower_names(self, mb, tower):
        prefix = f"mb{mb}.tower{tower}."
        return [n for n in self.params if n.startswith(prefix)]


@dataclass
class MaskedModel:
    """Reconfigured read-only view; masked towers are never evaluated."""

    model: Model
    mask: TowerMask
    mode: AggregationMode = AggregationMode.RESCALED
    cfg: ModelConfig = field(init=False)

    def __post_init__(self):
        self.cfg = self.model.cfg
        self.mask.check(self.cfg.towers)

    def forward(self, features, **kw):
        kw.setdefault("mode", self.mode)
        return model_forward(features, self.model, mask=self.mask, **kw)

    __call__ = forward


def apply_mask(model, mask, mode=AggregationMode.RESCALED):
    if isinstance(mask, str):
        mask = TowerMask.parse(mask, model.cfg.towers)
    return MaskedModel(model, mask, mode)
