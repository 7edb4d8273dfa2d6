"""``nmm`` command line: train, eval, sweep, report, bench.

Exit codes: 0 success, 2 invalid configuration / arguments / checkpoint,
3 training diverged, 4 sequential and threaded outputs differ.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .config import FullConfig, load_config
from .errors import ConfigError, DeterminismError, TrainingDiverged
from .mixture import AggregationMode, Model, TowerMask
from .tensor import make_rng
from .train import TrainConfig, train_loop

EXIT_CONFIG, EXIT_DIVERGED, EXIT_NONDETERMINISTIC = 2, 3, 4
INFERENCE_MODES = [m.value for m in AggregationMode if not m.training]
THREADS_ENV = "NMM_THREADS"

log = logging.getLogger("nmm")


def default_threads(fallback=1):
    """Worker count from ``NMM_THREADS`` if set, else ``fallback``."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return fallback
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"expected a positive integer, got {raw!r}", THREADS_ENV) from None
    if value < 1:
        raise ConfigError(f"expected a positive integer, got {raw!r}", THREADS_ENV)
    return value


def metrics_path(checkpoint):
    return f"{checkpoint}.metrics"


def _with_seed(cfg, seed):
    if seed is None:
        return cfg
    train = TrainConfig(**{**vars(cfg.train), "seed": seed})
    return FullConfig(cfg.model, cfg.optimizer, cfg.task_options, cfg.augment, train)


def _mask(text, model):
    return TowerMask.full(model.cfg.towers) if text is None else TowerMask.parse(text, model.cfg.towers)


def _load(args):
    if args.checkpoint is None:
        raise ConfigError("a checkpoint is required", "--checkpoint")
    return load_checkpoint(args.checkpoint)


def cmd_train(args, out):
    if args.config is None or args.checkpoint is None:
        raise ConfigError("train needs --config and --checkpoint (output path)")
    cfg = _with_seed(load_config(args.config), args.seed)
    threads = args.threads or default_threads()
    with open(metrics_path(args.checkpoint), "w", encoding="utf-8") as fh:
        try:
            model, metrics = train_loop(cfg.model, cfg.optimizer, cfg.task, cfg.augment, cfg.train,
                                        log_file=fh, threads=threads)
        except TrainingDiverged as exc:
            save_checkpoint(args.checkpoint, cfg, Model(cfg.model, exc.params, exc.buffers))
            print(f"error: {exc}; last good parameters saved to {args.checkpoint}", file=sys.stderr)
            return EXIT_DIVERGED
    save_checkpoint(args.checkpoint, cfg, model)
    final = [r for r in metrics if "ter" in r]
    out.write(f"checkpoint={args.checkpoint}\n")
    out.write(f"metrics={metrics_path(args.checkpoint)}\n")
    out.write(f"steps={cfg.train.steps}\n")
    if final:
        out.write(f"token_error_rate={final[-1]['ter']:.6f}\n")
    return 0


def cmd_eval(args, out):
    cfg, model = _load(args)
    batch = harness.eval_batch(cfg, args.seed)
    rep = harness.evaluate_masked(model, batch, _mask(args.mask, model), AggregationMode(args.mode),
                                  threads=args.threads or default_threads(), frames=args.frames)
    out.write("\n".join(rep.lines()) + "\n")
    return 0


def cmd_sweep(args, out):
    cfg, model = _load(args)
    batch = harness.eval_batch(cfg, args.seed)
    calib = harness.calibration_batch(cfg, args.seed).features if args.removal == "lowest-l2" else None
    order = harness.removal_order(model, args.removal, calib)
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    modes = [AggregationMode(m.strip()) for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m.training:
            raise ConfigError("sweep modes must be inference modes", "--modes")
    rows = harness.sweep(model, batch, order, targets, args.max_removed, modes,
                         threads=args.threads or default_threads(), frames=args.frames)
    out.write(harness.format_sweep(rows, args.removal, args.delimiter, args.pretty))
    return 0


def cmd_report(args, out):
    if args.config is None:
        if args.checkpoint is None:
            raise ConfigError("report needs --config or --checkpoint")
        cfg = _load(args)[0]
    else:
        cfg = load_config(args.config)
    out.write("\n".join(harness.architecture_report(cfg.model, args.frames)) + "\n")
    return 0


def cmd_bench(args, out):
    if args.checkpoint is not None:
        cfg, model = _load(args)
    elif args.config is not None:
        cfg = load_config(args.config)
        model = Model(cfg.model, seed=np.random.SeedSequence(args.seed or 0))
    else:
        raise ConfigError("bench needs --checkpoint or --config")
    if args.repeats < 1:
        raise ConfigError(f"must be >= 1, got {args.repeats}", "--repeats")
    threads = args.threads or default_threads(max(2, os.cpu_count() or 1))
    rng = make_rng(args.seed or 0)
    features = rng.standard_normal((args.batch, cfg.model.feature_dim, args.frames)).astype(np.float32)
    mask = _mask(args.mask, model)
    result = harness.bench(model, features, mask, AggregationMode(args.mode), threads, args.repeats)
    out.write(f"mask={mask}\nmode={args.mode}\nbatch={args.batch} frames={args.frames} repeats={args.repeats}\n")
    out.write(f"schedules_identical=true threads={threads}\n")
    for name, (median, p90) in result.summary().items():
        out.write(f"# timing {name} median_ms={median * 1e3:.3f} p90_ms={p90 * 1e3:.3f}\n")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report, "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="nmm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--checkpoint", help="NMM1 checkpoint (output path for train)")
        sp.add_argument("--mask", help="tower mask, e.g. mb1=110,mb3=011 (unlisted mega-blocks keep all towers)")
        sp.add_argument("--mode", default="rescaled", choices=INFERENCE_MODES, help="inference aggregation weights")
        sp.add_argument("--seed", type=int, help="overrides train.seed (data / held-out streams)")
        sp.add_argument("--threads", type=int, help=f"tower worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--frames", type=int, default=harness.REFERENCE_FRAMES,
                        help="input frames for FLOP counts and bench inputs")
        return sp

    common(sub.add_parser("train", help="train a model and write checkpoint + metrics log"))
    common(sub.add_parser("eval", help="token error rate, params and FLOPs of a masked model"))
    sw = common(sub.add_parser("sweep", help="accuracy vs towers removed"))
    sw.add_argument("--targets", default="first,last,all")
    sw.add_argument("--max-removed", type=int, default=1)
    sw.add_argument("--modes", default="rescaled,unscaled")
    sw.add_argument("--removal", default="lowest-l2", help="lowest-l2 (default), random:<seed> or exhaustive")
    sw.add_argument("--delimiter", default=",")
    sw.add_argument("--pretty", action="store_true", help="aligned columns instead of delimited text")
    common(sub.add_parser("report", help="architecture, receptive field, params and FLOPs"))
    b = common(sub.add_parser("bench", help="sequential vs threaded tower latency"))
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--batch", type=int, default=1)
    b.set_defaults(frames=256)
    return p


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError(f"must be >= 1, got {args.threads}", "--threads")
        return COMMANDS[args.command](args, out)
    except DeterminismError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONDETERMINISTIC
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
