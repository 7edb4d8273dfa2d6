"""Training pipeline: NovoGrad, warmup + cosine schedule, SpecAugment masks,
a synthetic sequence task and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ctc import corpus_token_error_rate, ctc_loss, greedy_decode
from .errors import ConfigError, TrainingDiverged
from .mixture import AggregationMode, Model
from .blocks import total_stride
from .tensor import Tensor, make_rng

log = logging.getLogger(__name__)

NOVOGRAD_EPS = 1e-8


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    beta1: float = 0.8
    beta2: float = 0.25
    weight_decay: float = 1e-3
    lr_final: float = 1e-5
    warmup_steps: int = 1000

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"must be in (0, 1), got {getattr(self, name)}", name)
        if self.lr <= 0:
            raise ConfigError(f"must be > 0, got {self.lr}", "lr")
        if not 0 <= self.lr_final < self.lr:
            raise ConfigError(f"must be in [0, lr), got {self.lr_final}", "lr_final")
        if self.weight_decay < 0:
            raise ConfigError(f"must be >= 0, got {self.weight_decay}", "weight_decay")
        if self.warmup_steps < 0:
            raise ConfigError(f"must be >= 0, got {self.warmup_steps}", "warmup_steps")


@dataclass
class NovoGradState:
    """First moment per element, second moment per parameter tensor."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def novograd_step(params, grads, state, lr, cfg):
    """Update ``params`` (name -> array) in place. Returns False, leaving
    everything untouched, if any gradient is non-finite.

    Parameters without a gradient (e.g. towers dropped this step) are skipped.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; step rejected", name)
            return False
    b1, b2, wd = cfg.beta1, cfg.beta2, cfg.weight_decay
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        norm2 = float(np.dot(g.ravel().astype(np.float64), g.ravel()))
        v = norm2 if name not in state.v else b2 * state.v[name] + (1 - b2) * norm2
        state.v[name] = v
        g_hat = g / w.dtype.type(math.sqrt(v) + NOVOGRAD_EPS)
        if wd:
            g_hat = g_hat + w.dtype.type(wd) * w
        m = g_hat if name not in state.m else w.dtype.type(b1) * state.m[name] + g_hat
        state.m[name] = m
        w -= w.dtype.type(lr) * m
    return True


def lr_schedule(step, total_steps, cfg):
    """Linear warmup from 0 to ``lr``, then cosine decay to ``lr_final``."""
    warm = cfg.warmup_steps
    if warm and step < warm:
        return cfg.lr * step / warm
    span = total_steps - warm
    progress = 1.0 if span <= 0 else min(1.0, (step - warm) / span)
    return cfg.lr_final + (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * progress)) / 2


@dataclass(frozen=True)
class SpecAugmentConfig:
    freq_masks: int = 2
    freq_width: int = 2
    time_masks: int = 2
    time_width: int = 4

    def __post_init__(self):
        for name in ("freq_masks", "freq_width", "time_masks", "time_width"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", name)


def sample_masks(channels, frames, cfg, rng):
    """Rectangles ``(axis, start, width)`` for one sample; axis is "freq" or "time".

    Widths are uniform in [0, max] and clamped to dim - 1.
    """
    rects = []
    for axis, count, width_max, dim in (("freq", cfg.freq_masks, cfg.freq_width, channels),
                                        ("time", cfg.time_masks, cfg.time_width, frames)):
        for _ in range(count):
            width = min(int(rng.integers(0, width_max + 1)), max(dim - 1, 0))
            start = int(rng.integers(0, dim - width + 1))
            rects.append((axis, start, width))
    return rects


def apply_masks(features, rects):
    """Zero the given rectangles of one (channels, frames) array; returns a copy."""
    out = np.array(features, copy=True)
    for axis, start, width in rects:
        if axis == "freq":
            out[start:start + width, :] = 0
        else:
            out[:, start:start + width] = 0
    return out


def spec_augment(features, cfg, rng, lengths=None):
    """Independent frequency and time masks per batch item; time masks stay
    within each item's valid length."""
    is_tensor = isinstance(features, Tensor)
    x = features.data if is_tensor else np.asarray(features)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        frames = x.shape[2] if lengths is None else int(lengths[i])
        out[i] = apply_masks(x[i], sample_masks(x.shape[1], frames, cfg, rng))
    return Tensor(out) if is_tensor else out


@dataclass(frozen=True)
class SyntheticTask:
    """Symbol sequences rendered as concatenated per-symbol feature patterns.

    Each symbol owns a fixed (feature_dim, frames_per_symbol) pattern: a random
    unit spectral vector under a half-sine envelope, scaled to unit RMS. The
    vectors are redrawn until every pair has cosine similarity below 0.5.
    """

    vocab_size: int = 5
    feature_dim: int = 16
    frames_per_symbol: int = 32
    noise_std: float = 0.5
    min_len: int = 1
    max_len: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("must be >= 1", "vocab")
        if self.frames_per_symbol < 1:
            raise ConfigError("must be >= 1", "frames_per_symbol")
        if self.noise_std < 0:
            raise ConfigError("must be >= 0", "noise_std")
        if not 0 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 0 <= min_len <= max_len, got {self.min_len}, {self.max_len}", "min_len")
        if self.max_len < 1:
            raise ConfigError("must be >= 1", "max_len")

    @property
    def codebook(self):
        cached = _CODEBOOKS.get(self)
        if cached is None:
            cached = _CODEBOOKS[self] = _make_codebook(self)
        return cached


_CODEBOOKS = {}


def _make_codebook(task):
    rng = make_rng(task.seed)
    v, f, fps = task.vocab_size, task.feature_dim, task.frames_per_symbol
    while True:
        vecs = rng.standard_normal((v, f))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        cos = vecs @ vecs.T
        if v == 1 or cos[~np.eye(v, dtype=bool)].max() < 0.5:
            break
    # half-sine envelope: energy dips to ~0 at symbol boundaries
    env = np.sin(np.pi * (np.arange(fps) + 0.5) / fps)
    book = vecs[:, :, None] * env[None, None, :]
    book *= math.sqrt(f * fps) / np.linalg.norm(book[0])
    return book.astype(np.float32)


@dataclass
class Batch:
    features: np.ndarray  # (B, F, T) zero-padded
    lengths: np.ndarray  # valid input frames per item
    targets: list

    def output_lengths(self, stride):
        return -(-self.lengths // stride)


def generate_batch(task, batch_size, rng):
    book = task.codebook
    fps = task.frames_per_symbol
    lens = rng.integers(task.min_len, task.max_len + 1, size=batch_size)
    targets = [tuple(int(s) for s in rng.integers(0, task.vocab_size, size=n)) for n in lens]
    frames = np.maximum(lens, 1) * fps
    feats = np.zeros((batch_size, task.feature_dim, int(frames.max())), dtype=np.float32)
    for i, seq in enumerate(targets):
        for j, s in enumerate(seq):
            feats[i, :, j * fps:(j + 1) * fps] = book[s]
        if task.noise_std:
            feats[i, :, :frames[i]] += (task.noise_std * rng.standard_normal((task.feature_dim, frames[i]))).astype(np.float32)
    return Batch(feats, frames, targets)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 100
    eval_size: int = 256

    def __post_init__(self):
        for name, low in (("steps", 0), ("batch_size", 1), ("eval_every", 0), ("eval_size", 1)):
            if getattr(self, name) < low:
                raise ConfigError(f"must be >= {low}, got {getattr(self, name)}", name)


def seed_streams(seed):
    """Init seed plus independent generators for data, augmentation, dropout
    and the held-out set."""
    init, *rest = np.random.SeedSequence(seed).spawn(5)
    return [init] + [make_rng(s) for s in rest]


def heldout_batch(task, train_cfg):
    return generate_batch(task, train_cfg.eval_size, seed_streams(train_cfg.seed)[4])


def evaluate(model, batch, mode=AggregationMode.RESCALED, mask=None, threads=1, chunk=64):
    """Corpus token error rate of greedy decoding on ``batch``."""
    stride = total_stride(model.cfg)
    out_lens = batch.output_lengths(stride)
    hyps = []
    for s in range(0, len(batch.targets), chunk):
        lp = model.forward(batch.features[s:s + chunk], mode, mask, threads=threads)
        hyps += greedy_decode(lp, out_lens[s:s + chunk])
    return corpus_token_error_rate(hyps, batch.targets)


def format_metrics(rec):
    line = f"step={rec['step']} lr={rec['lr']:.6g} loss={rec['loss']:.6g}"
    if "ter" in rec:
        line += f" ter={rec['ter']:.6g}"
    return line


def train_loop(model_cfg, opt_cfg, task, aug_cfg, train_cfg, log_file=None, threads=1):
    """Train a fresh model. Returns ``(model, metrics)``.

    Each step: batch -> SpecAugment -> forward with tower dropout -> CTC ->
    backward -> NovoGrad. Held-out TER is recorded every ``eval_every``
    steps and after the last one. Raises :class:`TrainingDiverged` if the
    loss becomes non-finite.
    """
    if (task.vocab_size, task.feature_dim) != (model_cfg.vocab_size, model_cfg.feature_dim):
        raise ConfigError("task vocab/feature_dim must match the model", "task")
    init_seed, data_rng, aug_rng, drop_rng, _ = seed_streams(train_cfg.seed)
    model = Model(model_cfg, seed=init_seed)
    last_good = model.state()
    heldout = heldout_batch(task, train_cfg)
    stride = total_stride(model_cfg)
    state = NovoGradState()
    arrays = {n: p.data for n, p in model.params.items()}
    metrics = []

    for step in range(1, train_cfg.steps + 1):
        batch = generate_batch(task, train_cfg.batch_size, data_rng)
        feats = spec_augment(batch.features, aug_cfg, aug_rng, batch.lengths)
        model.zero_grad()
        out = model.forward(feats, AggregationMode.TRAIN_SUM, rng=drop_rng, threads=threads)
        res = ctc_loss(out, batch.targets, batch.output_lengths(stride))
        if not math.isfinite(res.loss):
            raise TrainingDiverged(step, *last_good)
        out.backward(res.grad_log_probs.astype(out.dtype))
        grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
        lr = lr_schedule(step, train_cfg.steps, opt_cfg)
        last_good = model.state()
        novograd_step(arrays, grads, state, lr, opt_cfg)

        rec = {"step": step, "lr": lr, "loss": res.loss}
        if (train_cfg.eval_every and step % train_cfg.eval_every == 0) or step == train_cfg.steps:
            rec["ter"] = evaluate(model, heldout, threads=threads)
        metrics.append(rec)
        if log_file is not None:
            log_file.write(format_metrics(rec) + "\n")
    return model, metrics
