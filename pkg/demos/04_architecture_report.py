"""
Receptive field, parameters and FLOPs
=====================================

Every convolution widens the receptive field by (k - 1) times the product of
the strides before it. Squeeze-and-excitation pools over the whole sequence,
so strictly speaking it sees everything; the reported figure counts the
convolutions only.
"""

from nmm import harness
from nmm.blocks import receptive_field
from nmm.mixture import ModelConfig, flop_breakdown, param_count

full_size = ModelConfig(channels=384, repeats=5, kernel_size=11, towers=(5, 6, 7), feature_dim=80,
                         vocab_size=1024)
print("\n".join(harness.architecture_report(full_size)))

print("\nreceptive field (frames) by kernel size, R=5:")
for k in (3, 7, 11, 15):
    print(f"  k={k:2d}: {receptive_field(ModelConfig(repeats=5, kernel_size=k)):5d}")

base = param_count(full_size)
for name, change in (("C=512", dict(channels=512)), ("R=7", dict(repeats=7))):
    other = param_count(ModelConfig(**{**vars(full_size), **change}))
    print(f"params {name} / C=384,R=5: {other / base:.3f}")

print("\nFLOPs per component for 1000 input frames:")
for part, flops in flop_breakdown(full_size, 1000).items():
    print(f"  {part:14s} {flops / 1e9:8.2f} GFLOP")
