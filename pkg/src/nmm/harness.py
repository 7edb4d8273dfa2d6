"""Analysis built on a trained model: masked evaluation, tower-removal
sweeps, architecture reports and a schedule benchmark.

Every function here returns plain data; :mod:`nmm.cli` only formats it.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import re
import time
from dataclasses import dataclass

import numpy as np

from . import blocks as B
from .errors import ConfigError, DeterminismError
from .mixture import AggregationMode, TowerMask, flop_count, param_breakdown, param_count
from .tensor import Tensor, make_rng
from .train import TrainConfig, evaluate, generate_batch, heldout_batch

log = logging.getLogger(__name__)

REFERENCE_FRAMES = 1000  # 10 s of features at a 10 ms hop
SE_CAVEAT = "SE gates pool over the whole sequence; the receptive field counts convolutions only"
SWEEP_TARGETS = ("first", "last", "all")
SWEEP_MODES = (AggregationMode.RESCALED, AggregationMode.UNSCALED)
CALIBRATION_SIZE = 64


def eval_batch(cfg, seed=None):
    """Held-out batch of a full config; ``seed`` replaces ``train.seed``."""
    train = cfg.train if seed is None else TrainConfig(**{**vars(cfg.train), "seed": seed})
    return heldout_batch(cfg.task, train)


def calibration_batch(cfg, seed=None):
    """A batch disjoint from the training and held-out streams."""
    seed = cfg.train.seed if seed is None else seed
    rng = make_rng(np.random.SeedSequence([seed, 7919]))
    return generate_batch(cfg.task, CALIBRATION_SIZE, rng)


@dataclass(frozen=True)
class EvalReport:
    mask: TowerMask
    mode: AggregationMode
    token_error_rate: float
    params: int
    flops: int
    frames: int

    def lines(self):
        return [f"mask={self.mask}", f"mode={self.mode.value}",
                f"token_error_rate={self.token_error_rate:.6f}",
                f"params={self.params}", f"flops={self.flops}", f"flops_frames={self.frames}"]


def evaluate_masked(model, batch, mask=None, mode=AggregationMode.RESCALED, threads=1,
                    frames=REFERENCE_FRAMES):
    cfg = model.cfg
    mask = TowerMask.full(cfg.towers) if mask is None else mask.check(cfg.towers)
    ter = evaluate(model, batch, mode, mask, threads=threads)
    return EvalReport(mask, mode, ter, param_count(cfg, mask), flop_count(cfg, frames, mask), frames)


# --- tower removal policy -------------------------------------------------------

def tower_output_norms(model, features):
    """L2 norm of each tower's (unweighted) output, per mega-block, when the
    full model runs in inference mode on ``features``."""
    cfg = model.cfg
    params = {k: p.detach() for k, p in model.params.items()}
    scope = B.Scope(params, model.buffers)
    x = B.prologue(Tensor(features), scope.child("prologue"), cfg.channels, cfg.kernel_size)
    norms = []
    for i, n in enumerate(cfg.towers, 1):
        mb = scope.child(f"mb{i}")
        x = B.downsample_block(x, mb.child("down"), cfg.channels, cfg.kernel_size)
        outs = [B.tower(x, mb.child(f"tower{t}"), cfg.block, cfg.se).data for t in range(n)]
        norms.append([float(np.sqrt(np.sum(o.astype(np.float64) ** 2))) for o in outs])
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        x = Tensor(total)
    return norms


def removal_order(model, policy="lowest-l2", calibration=None):
    """Per mega-block list of tower indices in the order they get removed,
    or ``None`` for the ``exhaustive`` policy.

    ``lowest-l2`` removes the tower with the smallest output norm on the
    calibration features first (ties -> lower index); ``random:<seed>``
    uses a seeded permutation; ``exhaustive`` averages every row over all
    combinations of removed towers, i.e. the exact expectation under
    uniformly random removal.
    """
    towers = model.cfg.towers
    if policy == "exhaustive":
        return None
    m = re.fullmatch(r"random:(\d+)", policy)
    if m:
        rng = make_rng(int(m.group(1)))
        return [list(map(int, rng.permutation(n))) for n in towers]
    if policy != "lowest-l2":
        raise ConfigError(f"unknown removal policy {policy!r} (lowest-l2, random:<seed> or exhaustive)",
                          "removal")
    if calibration is None:
        raise ConfigError("lowest-l2 removal needs calibration features", "removal")
    norms = tower_output_norms(model, calibration)
    return [sorted(range(len(nm)), key=lambda t: (nm[t], t)) for nm in norms]


def _targeted(towers, target):
    return {"first": [0], "last": [len(towers) - 1], "all": list(range(len(towers)))}[target]


def removal_mask(towers, order, target, removed):
    """Mask with the first ``removed`` towers of ``order`` dropped in the targeted mega-blocks."""
    bits = [[True] * n for n in towers]
    for i in _targeted(towers, target):
        for t in order[i][:removed]:
            bits[i][t] = False
    return TowerMask(tuple(tuple(b) for b in bits))


def removal_masks(towers, order, target, removed):
    """Masks evaluated for one sweep cell: one for an explicit order, every
    combination when ``order`` is None."""
    if order is not None:
        return [removal_mask(towers, order, target, removed)]
    chosen = set(_targeted(towers, target))
    per_block = [itertools.combinations(range(n), removed) if i in chosen else [()]
                 for i, n in enumerate(towers)]
    return [TowerMask(tuple(tuple(t not in gone for t in range(n)) for n, gone in zip(towers, combo)))
            for combo in itertools.product(*per_block)]


def clamp_removed(towers, max_removed):
    limit = min(towers) - 1
    if max_removed > limit:
        log.warning("max_removed=%d clamped to %d (smallest mega-block has %d towers)",
                    max_removed, limit, min(towers))
        return limit
    if max_removed < 0:
        raise ConfigError(f"must be >= 0, got {max_removed}", "max_removed")
    return max_removed


SWEEP_COLUMNS = ("target", "towers_removed", "mode", "params", "flops", "token_error_rate")


def sweep(model, batch, order, targets=SWEEP_TARGETS, max_removed=1, modes=SWEEP_MODES,
          threads=1, frames=REFERENCE_FRAMES):
    """One row per (target, removed in 0..max_removed, mode) as a dict keyed by
    :data:`SWEEP_COLUMNS` (plus ``mask``). ``order`` comes from
    :func:`removal_order`; with ``None`` each row is the mean over all
    removal combinations."""
    towers = model.cfg.towers
    max_removed = clamp_removed(towers, max_removed)
    for t in targets:
        if t not in SWEEP_TARGETS:
            raise ConfigError(f"unknown target {t!r} (one of {', '.join(SWEEP_TARGETS)})", "targets")
    rows = []
    for target in targets:
        for removed in range(max_removed + 1):
            masks = removal_masks(towers, order, target, removed)
            for mode in modes:
                reps = [evaluate_masked(model, batch, m, mode, threads, frames) for m in masks]
                rows.append({"target": target, "towers_removed": removed, "mode": mode.value,
                             "params": reps[0].params, "flops": reps[0].flops,
                             "token_error_rate": float(np.mean([r.token_error_rate for r in reps])),
                             "mask": str(masks[0]) if len(masks) == 1 else f"mean-of-{len(masks)}"})
    return rows


def format_sweep(rows, policy, delimiter=",", pretty=False):
    """Delimiter-separated text; the first line records the removal policy."""
    head = f"# removal_policy={policy}"
    table = [list(SWEEP_COLUMNS) + ["mask"]]
    for r in rows:
        table.append([r["target"], str(r["towers_removed"]), r["mode"], str(r["params"]),
                      str(r["flops"]), f"{r['token_error_rate']:.6f}", r["mask"]])
    if pretty:
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        body = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)
        return head + "\n" + body + "\n"
    buf = io.StringIO()
    csv.writer(buf, delimiter=delimiter, lineterminator="\n").writerows(table)
    return head + "\n" + buf.getvalue()


def rescaled_wins(rows):
    """Fraction of (target, removed >= 1) cells where rescaled error <= unscaled error."""
    by_cell = {}
    for r in rows:
        if r["towers_removed"] >= 1:
            by_cell.setdefault((r["target"], r["towers_removed"]), {})[r["mode"]] = r["token_error_rate"]
    pairs = [c for c in by_cell.values() if {"rescaled", "unscaled"} <= set(c)]
    if not pairs:
        return float("nan")
    return sum(c["rescaled"] <= c["unscaled"] for c in pairs) / len(pairs)


# --- architecture report ---------------------------------------------------------

def architecture_report(cfg, frames=REFERENCE_FRAMES):
    """Lines of ``key=value`` text describing a model config."""
    m = cfg
    stride = B.total_stride(m)
    lines = [f"channels={m.channels} repeats={m.repeats} kernel_size={m.kernel_size} "
             f"feature_dim={m.feature_dim} vocab={m.vocab_size} se_reduction={m.se_reduction}",
             f"prologue: separable k={m.kernel_size} stride=2 {m.feature_dim}->{m.channels}"]
    breakdown = param_breakdown(m)
    for i, n in enumerate(m.towers, 1):
        lines.append(f"mb{i}: downsample(k={m.kernel_size}, stride=2) -> {n} towers x "
                     f"[{m.repeats} residual blocks k={m.kernel_size} + SE(bottleneck={m.se.bottleneck})] -> sum"
                     f" params_down={breakdown[f'mb{i}.down']} params_towers={breakdown[f'mb{i}.towers']}")
    lines += [f"epilogue: separable k={B.epilogue_kernel(m.kernel_size)} -> pointwise {m.channels}->{m.vocab_size + 1}"
              f" -> log_softmax",
              f"total_stride={stride}",
              f"receptive_field={B.receptive_field(m)}",
              f"note: {SE_CAVEAT}",
              f"params={param_count(m)}",
              f"flops={flop_count(m, frames)} flops_frames={frames}"]
    return lines


# --- benchmark -----------------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    threads: int
    timings: dict  # schedule name -> list of seconds

    def summary(self):
        out = {}
        for name, ts in self.timings.items():
            arr = np.array(ts)
            out[name] = (float(np.median(arr)), float(np.percentile(arr, 90)))
        return out


def check_schedules(model, features, mask=None, mode=AggregationMode.RESCALED, threads=2):
    """Run the forward pass sequentially and on a pool; raise if any bit differs."""
    a = model.forward(features, mode, mask, threads=1).data
    b = model.forward(features, mode, mask, threads=threads).data
    if a.shape != b.shape or not np.array_equal(a.view(np.uint8), b.view(np.uint8)):
        raise DeterminismError(f"threads=1 and threads={threads} outputs differ "
                               f"(max |diff| {np.abs(a - b).max():.3g})")
    return a


def bench(model, features, mask=None, mode=AggregationMode.RESCALED, threads=2, repeats=5):
    """Wall-clock forward latency for the sequential and threaded schedules,
    after asserting the two agree bit-for-bit."""
    if repeats < 1:
        raise ConfigError(f"must be >= 1, got {repeats}", "repeats")
    if threads < 1:
        raise ConfigError(f"must be >= 1, got {threads}", "threads")
    check_schedules(model, features, mask, mode, max(threads, 2))
    timings = {}
    for name, n in (("threads=1", 1), (f"threads={threads}", threads)):
        ts = []
        for _ in range(repeats):
            start = time.perf_counter()
            model.forward(features, mode, mask, threads=n)
            ts.append(time.perf_counter() - start)
        timings[name] = ts
    return BenchResult(threads, timings)
