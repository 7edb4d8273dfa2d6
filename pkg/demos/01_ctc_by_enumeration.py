"""
CTC loss against brute-force alignment enumeration
==================================================

The CTC loss marginalises over every frame-level alignment that collapses
to the target. For tiny problems the alignments can simply be listed, which
gives an independent oracle for the dynamic-programming implementation.
"""

import math

import numpy as np

from nmm.ctc import ctc_brute_force, ctc_loss, greedy_decode
from nmm.tensor import Tensor, log_softmax, make_rng

# Two frames, one real symbol (id 0) plus the blank (id 1), uniform
# probabilities: the alignments "0 0", "0 b" and "b 0" all collapse to (0,),
# so the likelihood is 3/4.
uniform = np.full((1, 2, 2), -math.log(2))
print("uniform 2x2, target (0,):", ctc_loss(uniform, [(0,)]).loss, "expected", -math.log(0.75))

# A repeated symbol needs a blank in between, so (0, 0) cannot fit in two frames.
print("target (0, 0) in two frames:", ctc_loss(uniform, [(0, 0)]).loss)

# Random instances: forward-backward and enumeration agree to rounding error.
rng = make_rng(0)
worst = 0.0
for _ in range(50):
    t, v = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    lp = log_softmax(Tensor(rng.standard_normal((1, v + 1, t)))).data
    labels = tuple(int(x) for x in rng.integers(0, v, size=rng.integers(0, 3)))
    a, b = ctc_loss(lp, [labels]).loss, ctc_brute_force(lp[0], labels)
    if math.isfinite(b):
        worst = max(worst, abs(a - b))
print(f"max |dp - enumeration| over 50 random instances: {worst:.2e}")

# The gradient with respect to the logits is softmax minus the posterior
# occupancy of each symbol, so it sums to zero over symbols in every frame.
res = ctc_loss(lp, [labels])
print("per-frame gradient sums:", np.round(res.grad.sum(axis=1), 12))

# Greedy decoding: per-frame argmax, merge repeats, drop blanks.
frames = np.full((1, 3, 5), -9.0)
frames[0, [0, 0, 2, 1, 1], np.arange(5)] = 0.0
print("greedy decode of a a _ b b:", greedy_decode(frames))
