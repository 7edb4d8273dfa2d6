"""
Running towers in parallel
==========================

Towers within a mega-block are independent, so they can run on a thread
pool. Outputs are still summed in ascending tower order, so the threaded
schedule is bit-identical to the sequential one; the benchmark checks this
before timing anything.
"""

import numpy as np

from nmm import harness
from nmm.mixture import Model, ModelConfig, TowerMask

cfg = ModelConfig(channels=64, repeats=2, kernel_size=11, towers=(4, 4, 4), feature_dim=16, vocab_size=5)
model = Model(cfg, seed=0)
x = np.random.default_rng(0).standard_normal((1, 16, 1024)).astype(np.float32)

half = TowerMask.parse("mb1=1010,mb2=1010,mb3=1010", cfg.towers)
for name, mask in (("full", None), ("half", half)):
    result = harness.bench(model, x, mask, threads=4, repeats=3)
    for schedule, (median, p90) in result.summary().items():
        print(f"{name:4s} {schedule:9s} median {median * 1e3:7.1f} ms  p90 {p90 * 1e3:7.1f} ms")
