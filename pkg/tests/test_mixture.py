import copy

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import max_rel_error, numerical_grad
from nmm import blocks as B
from nmm.checkpoint import to_bytes
from nmm.config import FullConfig
from nmm.errors import ConfigError
from nmm.mixture import (AggregationMode as A, Model, ModelConfig, TowerMask, apply_mask,
                         flop_breakdown, flop_count, inference_weights, megablock_forward,
                         param_breakdown, param_count, sample_tower_weights)
from nmm.tensor import Tensor, make_rng


def small_cfg(**kw):
    base = dict(channels=4, repeats=1, kernel_size=3, towers=(3, 3, 3), feature_dim=5, vocab_size=3,
                dropout_p=0.0)
    return ModelConfig(**{**base, **kw})


def tie_towers(model):
    """Copy tower 0's parameters into every other tower of each mega-block."""
    for mb, n in enumerate(model.cfg.towers, 1):
        for t in range(1, n):
            for name in model.tower_names(mb, 0):
                other = name.replace(f"mb{mb}.tower0.", f"mb{mb}.tower{t}.")
                model.params[other].data[...] = model.params[name].data
    for name in list(model.buffers):
        parts = name.split(".")
        if len(parts) > 2 and parts[1].startswith("tower") and parts[1] != "tower0":
            src = ".".join([parts[0], "tower0"] + parts[2:])
            model.buffers[name][...] = model.buffers[src]
    return model


def randomise(model, seed=0):
    """Non-trivial biases and BN statistics so towers genuinely differ."""
    rng = make_rng(seed)
    for name, p in model.params.items():
        if name.endswith(("beta", "bias")):
            p.data[...] = 0.1 * rng.standard_normal(p.shape)
    for name, b in model.buffers.items():
        b[...] = rng.uniform(0.5, 1.5, b.shape) if name.endswith("var") else 0.1 * rng.standard_normal(b.shape)
    return model


def mb_setup(n, seed=0, c=4, t=8):
    cfg = small_cfg(towers=(n,), channels=c)
    model = randomise(Model(cfg, seed=seed), seed).astype(np.float64)
    scope = B.Scope({k: p.detach() for k, p in model.params.items()}, model.buffers).child("mb1")
    x = Tensor(make_rng(seed + 1).standard_normal((2, c, t)))
    return cfg, scope, x


def tower_outputs(cfg, scope, x, n):
    down = B.downsample_block(x, scope.child("down"), cfg.channels, cfg.kernel_size)
    return np.stack([B.tower(down, scope.child(f"tower{i}"), cfg.block, cfg.se).data for i in range(n)])


# --- aggregation weights ----------------------------------------------------------------

def test_inference_weights_example():
    bits = (True, False, True, False, True)
    assert inference_weights(bits, A.RESCALED) == [5 / 3, 0, 5 / 3, 0, 5 / 3]
    assert inference_weights(bits, A.PAPER_LITERAL) == [1 / 3, 0, 1 / 3, 0, 1 / 3]
    assert inference_weights(bits, A.UNSCALED) == [1, 0, 1, 0, 1]
    with pytest.raises(ConfigError, match="at least one tower required"):
        inference_weights((False, False), A.RESCALED)


def test_zero_tower_dropout_keeps_every_tower():
    assert sample_tower_weights(6, 0.0, make_rng(0)) == [1.0] * 6


def test_train_sum_without_dropout_is_plain_sum():
    cfg, scope, x = mb_setup(3)
    y = megablock_forward(x, scope, cfg, 3, A.TRAIN_SUM, rng=make_rng(0)).data
    np.testing.assert_allclose(y, tower_outputs(cfg, scope, x, 3).sum(axis=0), rtol=1e-12)
    full = megablock_forward(x, scope, cfg, 3, A.RESCALED, bits=(True,) * 3).data
    np.testing.assert_array_equal(y, full)


def test_megablock_uses_the_sampled_weights():
    cfg, scope, x = mb_setup(4)
    cfg = ModelConfig(**{**vars(cfg), "tower_dropout_p": 0.5})
    rng = make_rng(11)
    w = sample_tower_weights(4, 0.5, copy.deepcopy(rng))
    y = megablock_forward(x, scope, cfg, 4, A.TRAIN_SUM, rng=rng).data
    expected = np.tensordot(np.array(w), tower_outputs(cfg, scope, x, 4), axes=1)
    np.testing.assert_allclose(y, expected, rtol=1e-12)


@pytest.mark.parametrize("n", [1, 3, 5])
def test_tied_towers_rescaled_exact_for_every_k(n):
    cfg, scope, x = mb_setup(n)
    model = tie_towers(randomise(Model(cfg, seed=0), 0).astype(np.float64))
    scope = B.Scope({k: p.detach() for k, p in model.params.items()}, model.buffers).child("mb1")
    full = megablock_forward(x, scope, cfg, n, A.RESCALED, bits=(True,) * n).data
    for k in range(1, n + 1):
        for start in range(n):
            bits = tuple(((i - start) % n) < k for i in range(n))
            y = megablock_forward(x, scope, cfg, n, A.RESCALED, bits=bits).data
            assert np.abs(y - full).max() <= 1e-6 * np.abs(full).max()


def test_k1_tied_output_equals_full():
    cfg = small_cfg()
    model = tie_towers(randomise(Model(cfg, seed=3), 3))
    x = make_rng(0).standard_normal((2, 5, 48)).astype(np.float32)
    full = model.forward(x).data
    one = model.forward(x, mask=TowerMask.parse("mb1=100,mb2=010,mb3=001", cfg.towers)).data
    np.testing.assert_allclose(one, full, rtol=1e-5, atol=1e-6)


def monte_carlo(n, p, draws, seed):
    cfg, scope, x = mb_setup(n, seed)
    outs = tower_outputs(cfg, scope, x, n)
    rng = make_rng(seed)
    w = np.array([sample_tower_weights(n, p, rng) for _ in range(draws)])
    samples = np.tensordot(w, outs, axes=1)
    return samples, outs.sum(axis=0)


@pytest.mark.parametrize("p", [0.1, 0.5])
def test_train_sum_preserves_expectation(p):
    # N=16 keeps the all-dropped resampling bias (factor 1/(1 - p^N)) far below MC noise
    draws = 10_000
    samples, target = monte_carlo(16, p, draws, seed=int(p * 10))
    se = samples.std(axis=0, ddof=1) / np.sqrt(draws)
    z = np.abs(samples.mean(axis=0) - target) / se
    assert z.max() < 4


def test_monte_carlo_mean_within_three_sigma():
    # the summed output of a block is one scalar statistic; its Monte-Carlo mean
    # over 1e4 draws at p=0.5 lies within 3 standard errors of the exact sum
    samples, target = monte_carlo(16, 0.5, 10_000, seed=7)
    totals = samples.reshape(len(samples), -1).sum(axis=1)
    se = totals.std(ddof=1) / np.sqrt(len(totals))
    assert abs(totals.mean() - target.sum()) < 3 * se


def test_all_dropped_resampling_bias_is_exact():
    # resampling conditions on "at least one kept": E[w_i] = 1 / (1 - p^N)
    n, p, draws = 2, 0.5, 40_000
    w = np.array([sample_tower_weights(n, p, make_rng(s)) for s in range(draws)])
    assert not np.any(w.sum(axis=1) == 0)
    expected = 1 / (1 - p ** n)
    se = w[:, 0].std(ddof=1) / np.sqrt(draws)
    assert abs(w[:, 0].mean() - expected) < 4 * se


# --- masks ------------------------------------------------------------------------------------

def test_mask_grammar():
    m = TowerMask.parse("mb1=10,mb2=11,mb3=11", (2, 2, 2))
    assert m.bits == ((True, False), (True, True), (True, True))
    assert m.kept == (1, 2, 2)
    assert str(m) == "mb1=10,mb2=11,mb3=11"
    assert TowerMask.parse("mb2=01", (2, 2, 2)).bits == ((True, True), (False, True), (True, True))
    assert TowerMask.parse("", (2, 3)) == TowerMask.full((2, 3))


@pytest.mark.parametrize("text", ["mb1=00", "mb1=1", "mb4=11", "mb1=12", "tower1=11", "mb1=11,mb1=10",
                                  "mb0=11"])
def test_mask_grammar_errors(text):
    with pytest.raises(ConfigError):
        TowerMask.parse(text, (2, 2, 2))


@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=7), min_size=1, max_size=4))
def test_mask_text_round_trip(bits):
    bits = [b if any(b) else [True] + b[1:] for b in bits]
    mask = TowerMask(tuple(tuple(b) for b in bits))
    assert TowerMask.parse(str(mask), [len(b) for b in bits]) == mask


def test_mask_must_match_towers():
    with pytest.raises(ConfigError):
        Model(small_cfg()).forward(np.zeros((1, 5, 16)), mask=TowerMask.full((3, 3)))


# --- full model ---------------------------------------------------------------------------------

def test_model_output_shape():
    cfg = ModelConfig(channels=32, repeats=2, kernel_size=11, feature_dim=40, vocab_size=4)
    y = Model(cfg).forward(np.ones((1, 40, 64), dtype=np.float32))
    assert y.shape == (1, 5, 4)


def test_eval_forward_deterministic_and_masking_changes_output():
    cfg = small_cfg()
    model = randomise(Model(cfg, seed=1), 1)
    x = make_rng(0).standard_normal((2, 5, 40)).astype(np.float32)
    a, b = model.forward(x).data, model.forward(x).data
    assert a.tobytes() == b.tobytes()
    masked = model.forward(x, mask=TowerMask.parse("mb1=110,mb2=101,mb3=011", cfg.towers)).data
    assert masked.shape == a.shape and not np.array_equal(masked, a)


def test_rescaled_and_unscaled_differ_unless_full():
    cfg = small_cfg()
    model = randomise(Model(cfg, seed=1), 1)
    x = make_rng(0).standard_normal((2, 5, 40)).astype(np.float32)
    mask = TowerMask.parse("mb2=101", cfg.towers)
    assert not np.array_equal(model.forward(x, A.RESCALED, mask).data, model.forward(x, A.UNSCALED, mask).data)
    np.testing.assert_array_equal(model.forward(x, A.RESCALED).data, model.forward(x, A.UNSCALED).data)


def test_apply_mask_is_a_view():
    cfg = small_cfg()
    model = randomise(Model(cfg, seed=2), 2)
    before = to_bytes(FullConfig(cfg), model)
    x = make_rng(0).standard_normal((2, 5, 40)).astype(np.float32)
    full_view = apply_mask(model, TowerMask.full(cfg.towers))
    np.testing.assert_array_equal(full_view(x).data, model.forward(x).data)
    view = apply_mask(model, "mb1=001,mb3=100", A.UNSCALED)
    view(x)
    assert to_bytes(FullConfig(cfg), model) == before
    with pytest.raises(ConfigError):
        apply_mask(model, "mb1=000")


def test_masked_towers_are_never_evaluated():
    cfg = small_cfg()
    model = Model(cfg, seed=0)
    for name in model.tower_names(1, 2):
        model.params[name].data[...] = np.nan  # would poison the output if touched
    y = model.forward(np.ones((1, 5, 32), dtype=np.float32), mask=TowerMask.parse("mb1=110", cfg.towers))
    assert np.all(np.isfinite(y.data))


def test_threaded_towers_bit_identical():
    cfg = small_cfg(towers=(4, 5, 3))
    model = randomise(Model(cfg, seed=4), 4)
    x = make_rng(0).standard_normal((3, 5, 64)).astype(np.float32)
    for mask in (None, TowerMask.parse("mb2=10110", cfg.towers)):
        seq = model.forward(x, mask=mask, threads=1).data
        par = model.forward(x, mask=mask, threads=4).data
        assert seq.tobytes() == par.tobytes()
    # training mode: dropout streams are drawn per tower before any tower runs
    cfg = small_cfg(towers=(4, 5, 3), tower_dropout_p=0.3, dropout_p=0.2)
    model = Model(cfg, seed=4)
    a = model.forward(x, A.TRAIN_SUM, rng=make_rng(9), threads=1).data
    b = model.forward(x, A.TRAIN_SUM, rng=make_rng(9), threads=3).data
    assert a.tobytes() == b.tobytes()


def test_full_model_gradient():
    cfg = ModelConfig(channels=8, repeats=1, kernel_size=3, towers=(2, 2, 2), feature_dim=4, vocab_size=3,
                      tower_dropout_p=0.25, dropout_p=0.1)
    model = randomise(Model(cfg, seed=0), 0).astype(np.float64)
    x = make_rng(1).standard_normal((2, 4, 32))
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def forward():
        for k, v in buffers.items():
            model.buffers[k][...] = v
        return model.forward(x, A.TRAIN_SUM, rng=make_rng(5))

    out = forward()
    r = make_rng(2).standard_normal(out.shape)
    model.zero_grad()
    out.backward(r)
    # ReLU kinks make O(h) errors at h=1e-3 through a deep stack; a small step in
    # float64 keeps every perturbation on one side of each kink.
    for name, p in model.params.items():
        if p.grad is None:
            continue
        num = numerical_grad(lambda: float(np.sum(forward().data * r)), p.data, h=1e-6)
        assert max_rel_error(p.grad, num) < 1e-4, name


def test_gradient_flows_only_through_kept_towers(monkeypatch):
    from nmm import mixture
    # C=16 and a batch of 8 keep the SE bottleneck ReLUs from being dead for every
    # pooled sample (a dead ReLU legitimately zeroes fc1's gradient)
    cfg = small_cfg(towers=(4, 4, 4), channels=16, tower_dropout_p=0.5, dropout_p=0.1)
    model = Model(cfg, seed=0)
    drawn = []

    def recording(n, p, rng):
        drawn.append(sample_tower_weights(n, p, rng))
        return drawn[-1]

    monkeypatch.setattr(mixture, "sample_tower_weights", recording)
    out = model.forward(make_rng(0).standard_normal((8, 5, 128)).astype(np.float32), A.TRAIN_SUM, rng=make_rng(3))
    out.backward(make_rng(1).standard_normal(out.shape).astype(np.float32))
    assert any(0.0 in w for w in drawn)
    for mb, weights in enumerate(drawn, 1):
        for t, w in enumerate(weights):
            grads = [model.params[name].grad for name in model.tower_names(mb, t)]
            if w == 0:
                assert all(g is None for g in grads)
            else:
                assert all(g is not None and np.linalg.norm(g) > 0 for g in grads)
    shared = [n for n in model.params if ".tower" not in n]
    assert all(np.linalg.norm(model.params[n].grad) > 0 for n in shared)


# --- accounting -------------------------------------------------------------------------------------

def test_flops_drop_with_removed_towers():
    cfg = ModelConfig(towers=(2, 2, 2), channels=16, feature_dim=8, vocab_size=4)
    full = flop_count(cfg, 200)
    assert flop_count(cfg, 200, TowerMask.parse("mb1=10,mb2=11,mb3=11", cfg.towers)) < full
    half = TowerMask.parse("mb1=10,mb2=01,mb3=10", cfg.towers)
    assert flop_count(cfg, 200, half) < 0.7 * full


def test_removing_four_of_five_towers_scales_first_megablock():
    cfg = ModelConfig(channels=32)
    mask = TowerMask.parse("mb1=00100", cfg.towers)
    f_full, f_mask = flop_breakdown(cfg, 320), flop_breakdown(cfg, 320, mask)
    assert f_mask["mb1.towers"] * 5 == f_full["mb1.towers"]
    p_full, p_mask = param_breakdown(cfg), param_breakdown(cfg, mask)
    assert p_mask["mb1.towers"] * 5 == p_full["mb1.towers"]
    assert {k: v for k, v in p_mask.items() if k != "mb1.towers"} == \
           {k: v for k, v in p_full.items() if k != "mb1.towers"}


def test_param_count_matches_model_arrays():
    cfg = small_cfg()
    model = Model(cfg)
    assert param_count(cfg) == sum(p.data.size for p in model.params.values())
    assert param_count(model) == param_count(cfg)
    view = apply_mask(model, "mb1=100")
    removed = sum(model.params[n].data.size for t in (1, 2) for n in model.tower_names(1, t))
    assert param_count(view) == param_count(cfg) - removed


def test_flop_count_counts_convs_exactly():
    # prologue of a model with one mega-block: dw (k MACs per output) + pw (F*C MACs per output)
    cfg = ModelConfig(channels=8, kernel_size=5, towers=(1,), feature_dim=4, vocab_size=2, repeats=1)
    t = 20
    dw = 2 * 4 * 5 * 10
    pw = 2 * 4 * 8 * 10
    assert flop_breakdown(cfg, t)["prologue"] == dw + pw + 3 * 8 * 10


@pytest.mark.parametrize("field,kwargs", [("tower_dropout_p", dict(tower_dropout_p=1.5)),
                                          ("tower_dropout_p", dict(tower_dropout_p=1.0)),
                                          ("k", dict(kernel_size=4)), ("C", dict(channels=0)),
                                          ("towers", dict(towers=(3, 0))), ("R", dict(repeats=0))])
def test_config_errors_name_the_field(field, kwargs):
    with pytest.raises(ConfigError) as exc:
        ModelConfig(**kwargs)
    assert exc.value.field == field
