import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import reference_forward
from vlaprune.model import (
    AttentionBiasSpec,
    ModelConfig,
    TokenLayout,
    build_model,
    forward_dense,
    forward_masked,
    forward_resume,
)


def embed(layout, d, seed=0):
    return np.random.default_rng(seed).normal(size=(layout.seq_len, d))


def test_same_seed_same_parameters(tiny_cfg):
    assert build_model(tiny_cfg).checksum() == build_model(tiny_cfg).checksum()
    other = ModelConfig(**{**tiny_cfg.__dict__, "seed": tiny_cfg.seed + 1})
    assert build_model(other).checksum() != build_model(tiny_cfg).checksum()


def test_head_dim():
    assert ModelConfig(hidden_dim=64, num_heads=8).head_dim == 8


@pytest.mark.parametrize("kw", [
    dict(hidden_dim=65, num_heads=8),
    dict(num_layers=2),
    dict(num_heads=0),
    dict(ffn_dim=-1),
    dict(hidden_dim=12, num_heads=4),   # odd head_dim cannot be rotated in pairs
])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_layout_ranges():
    lay = TokenLayout.build([("a", 6), ("b", 4)], 3, 2)
    assert lay.seq_len == 15 and lay.num_visual == 10 and lay.num_text == 3
    assert lay.view_indices("b").tolist() == [6, 7, 8, 9]
    assert lay.text_indices().tolist() == [10, 11, 12]
    assert lay.action_indices().tolist() == [13, 14]
    assert lay.is_visual(np.array([0, 9, 10])).tolist() == [True, True, False]
    with pytest.raises(ValueError):
        TokenLayout((("a", 0, 5),), (6, 8), (8, 9))


def test_full_retention_matches_unmasked(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim)
    full = forward_masked(tiny_model, e, tiny_layout)
    every = forward_masked(tiny_model, e, tiny_layout, retained=range(tiny_layout.seq_len))
    assert np.array_equal(full.action_hidden, every.action_hidden)


def test_masked_equals_gather_then_dense(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, 1)
    keep = np.array([0, 3, 4, 8] + tiny_layout.protected_indices().tolist())
    res = forward_masked(tiny_model, e, tiny_layout, retained=keep)
    hidden, _, _ = forward_dense(tiny_model, e[keep], keep)
    lo, hi = tiny_layout.action_range
    out = tiny_model.final_hidden(hidden[(keep >= lo) & (keep < hi)])
    assert np.array_equal(res.action_hidden, out)


def test_forward_matches_per_head_reference(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, 2)
    keep = np.array([1, 2, 5, 7] + tiny_layout.protected_indices().tolist())
    res = forward_masked(tiny_model, e, tiny_layout, retained=keep)
    sched = {l: keep for l in range(1, tiny_model.cfg.num_layers + 1)}
    ref, pos = reference_forward(tiny_model, e, sched)
    lo, hi = tiny_layout.action_range
    ref_action = tiny_model.final_hidden(ref[(pos >= lo) & (pos < hi)])
    np.testing.assert_allclose(res.action_hidden, ref_action, rtol=0, atol=1e-12)


def test_resume_after_dropping_half_the_visual_tokens(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, 3)
    first = forward_masked(tiny_model, e, tiny_layout, stop_layer=2, capture_layers=(1, 2))
    assert first.record.layers == [1, 2]
    visual = tiny_layout.visual_indices()
    keep = np.concatenate([visual[::2], tiny_layout.protected_indices()])
    resumed = forward_resume(tiny_model, first.checkpoint, tiny_layout, retained=keep)

    everything = np.arange(tiny_layout.seq_len)
    sched = {1: everything, 2: everything, 3: keep, 4: keep}
    ref, pos = reference_forward(tiny_model, e, sched)
    lo, hi = tiny_layout.action_range
    ref_action = tiny_model.final_hidden(ref[(pos >= lo) & (pos < hi)])
    np.testing.assert_allclose(resumed.action_hidden, ref_action, rtol=0, atol=1e-12)


def test_resume_without_change_equals_uninterrupted(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, 4)
    whole = forward_masked(tiny_model, e, tiny_layout)
    part = forward_masked(tiny_model, e, tiny_layout, stop_layer=2)
    rest = forward_resume(tiny_model, part.checkpoint, tiny_layout)
    assert np.array_equal(whole.action_hidden, rest.action_hidden)


def test_resume_errors(tiny_model, tiny_layout, tiny_cfg):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim)
    keep = np.concatenate([[0, 1], tiny_layout.protected_indices()])
    part = forward_masked(tiny_model, e, tiny_layout, retained=keep, stop_layer=2)
    with pytest.raises(ValueError):
        forward_resume(tiny_model, part.checkpoint, tiny_layout, retained=np.concatenate([keep, [5]]))
    other = build_model(ModelConfig(**{**tiny_cfg.__dict__, "seed": 99}))
    with pytest.raises(ValueError):
        forward_resume(other, part.checkpoint, tiny_layout)


def test_retained_must_keep_text_and_action(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim)
    with pytest.raises(ValueError):
        forward_masked(tiny_model, e, tiny_layout, retained=range(tiny_layout.seq_len - 1))
    with pytest.raises(IndexError):
        forward_masked(tiny_model, e, tiny_layout, retained=list(range(tiny_layout.seq_len + 1)))


def test_zero_bias_is_neutral(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, 5)
    plain = forward_masked(tiny_model, e, tiny_layout, capture_layers=(1, 4))
    zero = forward_masked(tiny_model, e, tiny_layout, bias=AttentionBiasSpec.zeros(tiny_layout),
                          capture_layers=(1, 4))
    assert np.array_equal(plain.action_hidden, zero.action_hidden)
    assert np.array_equal(plain.record.weights[4], zero.record.weights[4])


def test_bias_matches_reference(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, 6)
    bias = AttentionBiasSpec.zeros(tiny_layout)
    bias.key_bias[[2, 7]] = 3.0
    res = forward_masked(tiny_model, e, tiny_layout, bias=bias)
    everything = np.arange(tiny_layout.seq_len)
    ref, pos = reference_forward(tiny_model, e, {l: everything for l in range(1, 5)},
                                 bias.key_bias, bias.query_mask)
    lo, hi = tiny_layout.action_range
    np.testing.assert_allclose(res.action_hidden, tiny_model.final_hidden(ref[(pos >= lo) & (pos < hi)]),
                               atol=1e-12)


def test_bias_must_be_finite(tiny_layout):
    with pytest.raises(ValueError):
        AttentionBiasSpec(np.full(tiny_layout.seq_len, np.inf), np.ones(tiny_layout.seq_len, bool))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 9), unique=True), st.integers(0, 2**16))
def test_attention_rows_are_stochastic_and_causal(tiny_model, tiny_layout, visual, seed):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim, seed)
    keep = np.concatenate([np.array(visual, dtype=np.int64), tiny_layout.protected_indices()])
    res = forward_masked(tiny_model, e, tiny_layout, retained=keep, capture_layers=range(1, 5))
    for layer in res.record.layers:
        w, pos = res.record.require(layer)
        assert w.shape == (tiny_model.cfg.num_heads, pos.size, pos.size)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(w[:, pos[:, None] < pos[None, :]] == 0.0)


def test_flop_count_strictly_increases_with_retained(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim)
    counts = []
    for n in range(tiny_layout.num_visual + 1):
        keep = np.concatenate([np.arange(n), tiny_layout.protected_indices()])
        counts.append(forward_masked(tiny_model, e, tiny_layout, retained=keep).flops.total)
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_missing_layer_raises(tiny_model, tiny_layout):
    e = embed(tiny_layout, tiny_model.cfg.hidden_dim)
    res = forward_masked(tiny_model, e, tiny_layout, capture_layers=(1,))
    with pytest.raises(KeyError):
        res.record.require(3)
