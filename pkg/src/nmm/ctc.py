"""CTC loss (log-space forward-backward), greedy decoding, token error rate,
and an exhaustive enumeration oracle for checking the loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

BRUTE_FORCE_LIMIT = 10**7


@dataclass(frozen=True)
class CtcTarget:
    """Label ids in [0, V-1]; blank is the last channel, V."""

    labels: tuple
    blank: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if any(not 0 <= l < self.blank for l in self.labels):
            raise ConfigError(f"labels {self.labels} must lie in [0, {self.blank - 1}]", "labels")

    @property
    def min_frames(self):
        """Shortest input that admits an alignment: one frame per label plus a
        blank between each pair of equal neighbours."""
        repeats = sum(a == b for a, b in zip(self.labels, self.labels[1:]))
        return len(self.labels) + repeats

    def feasible(self, frames):
        return frames >= self.min_frames


@dataclass
class CtcResult:
    loss: float
    losses: np.ndarray
    infeasible: np.ndarray
    grad: np.ndarray
    grad_log_probs: np.ndarray


def _as_target(t, blank):
    return t if isinstance(t, CtcTarget) else CtcTarget(tuple(t), blank)


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def _shift(v, n):
    out = np.full_like(v, -np.inf)
    out[n:] = v[:-n]
    return out


def _forward_backward(lp, labels, blank):
    """Returns (log Z, occupancy gamma of shape (T, V+1)) for one item.

    ``lp`` is (T, V+1) float64. alpha/beta both include the emission at t.
    """
    t_len = lp.shape[0]
    ext = np.full(2 * len(labels) + 1, blank)
    ext[1::2] = labels
    s_len = ext.size
    # the s-2 transition is allowed into a label that differs from the label two back
    skip = np.zeros(s_len, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]

    alpha = np.full((t_len, s_len), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        two = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = _logsumexp3(prev, _shift(prev, 1), two) + emit[t]

    beta = np.full((t_len, s_len), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        two = np.where(skip_from, _shift(nxt[::-1], 2)[::-1], -np.inf)
        beta[t] = _logsumexp3(nxt, _shift(nxt[::-1], 1)[::-1], two) + emit[t]

    tail = alpha[-1, -2:] if s_len > 1 else alpha[-1, -1:]
    log_z = np.logaddexp.reduce(tail)
    occ = alpha + beta - emit - log_z
    gamma = np.zeros_like(lp)
    for k in np.unique(ext):
        cols = occ[:, ext == k]
        gamma[:, k] = np.exp(np.logaddexp.reduce(cols, axis=1))
    return log_z, gamma


def ctc_loss(log_probs, targets, lengths=None):
    """Mean negative log-likelihood over feasible items.

    ``log_probs`` is (B, V+1, T') of per-frame log-probabilities (blank =
    channel V); ``lengths`` optionally gives the valid frame count per item.
    ``grad`` is the gradient of the mean loss w.r.t. the pre-softmax logits
    and ``grad_log_probs`` w.r.t. ``log_probs`` itself. Infeasible items get
    loss +inf, zero gradient, and are left out of the mean.
    """
    lp_all = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    if lp_all.ndim != 3:
        raise ConfigError(f"ctc_loss expects (B, V+1, T) log-probs, got shape {lp_all.shape}")
    b, v1, t_max = lp_all.shape
    if len(targets) != b:
        raise ConfigError(f"{len(targets)} targets for a batch of {b}")
    lengths = [t_max] * b if lengths is None else [int(l) for l in lengths]
    blank = v1 - 1

    losses = np.full(b, np.inf)
    infeasible = np.zeros(b, dtype=bool)
    grad_lp = np.zeros_like(lp_all)
    grad = np.zeros_like(lp_all)
    for i, target in enumerate(targets):
        target = _as_target(target, blank)
        if target.blank != blank:
            raise ConfigError(f"target blank {target.blank} does not match channel count {v1}")
        t_i = lengths[i]
        if t_i < 1 or not target.feasible(t_i):
            infeasible[i] = True
            continue
        lp = lp_all[i, :, :t_i].T
        log_z, gamma = _forward_backward(lp, np.array(target.labels, dtype=int), blank)
        losses[i] = -log_z
        grad_lp[i, :, :t_i] = -gamma.T
        grad[i, :, :t_i] = (np.exp(lp) - gamma).T

    n = int((~infeasible).sum())
    loss = float(losses[~infeasible].mean()) if n else float("inf")
    if n:
        grad_lp /= n
        grad /= n
    return CtcResult(loss, losses, infeasible, grad, grad_lp)


def collapse(path, blank):
    """Merge repeated ids, then drop blanks."""
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return tuple(out)


def ctc_brute_force(log_probs, target):
    """-log p(target) by summing over every length-T' path; ``log_probs`` is (V+1, T')."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim == 3 and lp.shape[0] == 1:
        lp = lp[0]
    v1, t_len = lp.shape
    blank = v1 - 1
    labels = tuple(_as_target(target, blank).labels)
    if v1 ** t_len > BRUTE_FORCE_LIMIT:
        raise ConfigError(f"{v1}^{t_len} paths exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    frames = np.arange(t_len)
    radix = v1 ** np.arange(t_len - 1, -1, -1)
    want = np.array(labels, dtype=np.int64)
    hits = []
    chunk = 1 << 18
    for start in range(0, v1 ** t_len, chunk):
        # every path in this chunk, decoded from its mixed-radix index
        idx = np.arange(start, min(start + chunk, v1 ** t_len))
        paths = (idx[:, None] // radix) % v1
        prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
        keep = (paths != blank) & (paths != prev)
        rows = np.flatnonzero(keep.sum(axis=1) == len(labels))
        if len(labels):
            emitted = paths[rows][keep[rows]].reshape(len(rows), len(labels))
            rows = rows[(emitted == want).all(axis=1)]
        hits.append(lp[paths[rows], frames].sum(axis=1))
    hits = np.concatenate(hits)
    if hits.size == 0:
        return float("inf")
    return float(-np.logaddexp.reduce(hits))


def greedy_decode(log_probs, lengths=None):
    """Per-frame argmax (ties -> lowest id), collapse repeats, drop blanks."""
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    if lp.ndim == 2:
        lp = lp[None]
    blank = lp.shape[1] - 1
    best = lp.argmax(axis=1)
    lengths = [lp.shape[2]] * lp.shape[0] if lengths is None else lengths
    return [collapse(best[i, :int(n)], blank) for i, n in enumerate(lengths)]


def edit_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(hyp, ref):
    """Levenshtein distance normalised by max(1, len(ref))."""
    return edit_distance(list(hyp), list(ref)) / max(1, len(ref))


def corpus_token_error_rate(hyps, refs):
    """Total edits over total reference length (each reference counts >= 1)."""
    edits = sum(edit_distance(list(h), list(r)) for h, r in zip(hyps, refs))
    return edits / sum(max(1, len(r)) for r in refs)
