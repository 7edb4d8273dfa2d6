"""
Removing towers at inference time
=================================

A mega-block sums the outputs of N parallel towers. At inference any subset
of K towers can be kept; the survivors are weighted by N/K so the block's
expected output is unchanged. Models trained with tower dropout are robust to
this; models trained without it degrade noticeably.

This script trains the reference toy model twice (tower dropout 0 and 0.1,
about half a minute each), then compares the cost of removal and the effect of rescaling.
"""

from pathlib import Path

import numpy as np

from nmm import harness
from nmm.config import FullConfig, load_config
from nmm.mixture import AggregationMode, TowerMask, apply_mask, param_count
from nmm.train import train_loop

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
base = load_config(CONFIGS / "toy.yaml")

# Mask strings name the kept towers of each mega-block; unlisted blocks keep all.
mask = TowerMask.parse("mb1=110,mb3=011", base.model.towers)
print("mask", mask, "kept per mega-block:", mask.kept)
print("params full / masked:", param_count(base.model), param_count(base.model, mask))

for td in (0.0, 0.1):
    model_cfg = base.model.__class__(**{**vars(base.model), "tower_dropout_p": td})
    cfg = FullConfig(model_cfg, base.optimizer, base.task_options, base.augment, base.train)
    model, _ = train_loop(cfg.model, cfg.optimizer, cfg.task, cfg.augment, cfg.train)
    batch = harness.eval_batch(cfg)

    # A masked view shares the trained weights; nothing is copied or modified.
    view = apply_mask(model, mask)
    print(f"\nTD={td}: masked view output shape {view(batch.features[:2]).shape}")

    # Averaging over every way of removing one tower per mega-block gives the
    # expected cost of removal, independent of which towers happen to be chosen.
    rows = harness.sweep(model, batch, None, targets=("all",), max_removed=2,
                         modes=(AggregationMode.RESCALED, AggregationMode.UNSCALED))
    print(harness.format_sweep(rows, "exhaustive", pretty=True))
    full = next(r["token_error_rate"] for r in rows if r["towers_removed"] == 0)
    one = np.mean([r["token_error_rate"] for r in rows
                   if r["towers_removed"] == 1 and r["mode"] == "rescaled"])
    print(f"TD={td}: error {full:.3f} -> {one:.3f} after removing one tower per mega-block")
