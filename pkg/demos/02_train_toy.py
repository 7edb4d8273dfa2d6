"""
Training a small mixture model on the synthetic task
====================================================

The synthetic task renders each symbol as a fixed spectral pattern under a
smooth time envelope, adds Gaussian noise, and asks the model to transcribe
the symbol sequence with CTC. Training uses NovoGrad with linear warmup and
cosine decay, plus SpecAugment-style masking.
"""

import io
import sys
from pathlib import Path

from nmm import harness
from nmm.checkpoint import save_checkpoint
from nmm.config import load_config
from nmm.train import train_loop

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("toy_small.nmm")

cfg = load_config(CONFIGS / "toy_small.yaml")
print(f"model: C={cfg.model.channels} R={cfg.model.repeats} k={cfg.model.kernel_size} "
      f"towers={list(cfg.model.towers)}; {cfg.train.steps} steps of batch {cfg.train.batch_size}")

log = io.StringIO()
model, metrics = train_loop(cfg.model, cfg.optimizer, cfg.task, cfg.augment, cfg.train, log_file=log)

# The metrics log has one line per step; evaluation steps also carry a
# held-out token error rate.
for line in log.getvalue().splitlines():
    if "ter=" in line:
        print(line)

report = harness.evaluate_masked(model, harness.eval_batch(cfg))
print("held-out:", " ".join(report.lines()))
save_checkpoint(out, cfg, model)
print("saved", out)
