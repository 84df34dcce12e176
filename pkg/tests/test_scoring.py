import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_attention
from helpers import naive_score
from vlaprune.model import AttentionRecord, TokenLayout
from vlaprune.scoring import (
    VISUAL_TO_TEXT,
    TokenScoreVector,
    hit_rate,
    scores_from_attention,
    task_attention_score,
    top_k_per_view,
    top_k_tokens,
)


def single_record(weights, positions=None):
    rec = AttentionRecord()
    rec.add(1, weights, np.arange(weights.shape[-1]) if positions is None else positions)
    return rec


def test_single_query_weight():
    lay = TokenLayout.build([("v", 4)], 1, 0)
    w = np.zeros((1, 5, 5))
    w[0, 4, 3] = 0.37
    s = task_attention_score(single_record(w), lay, 1)
    assert s.as_dict()[3] == pytest.approx(0.37)


def test_two_heads_two_text_tokens():
    lay = TokenLayout.build([("v", 6)], 2, 0)
    w = np.zeros((2, 8, 8))
    w[0, 6, 5], w[0, 7, 5] = 0.1, 0.2
    w[1, 6, 5], w[1, 7, 5] = 0.3, 0.4
    assert task_attention_score(single_record(w), lay, 1).as_dict()[5] == pytest.approx(0.25)


def test_uniform_attention_gives_reciprocal():
    lay = TokenLayout.build([("v", 7)], 3, 2)
    s = lay.seq_len
    w = np.full((4, s, s), 1.0 / s)
    np.testing.assert_allclose(task_attention_score(single_record(w), lay, 1).scores, 1.0 / s)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 12), st.integers(0, 2**20))
def test_matches_triple_loop(heads, m, nv, seed):
    rng = np.random.default_rng(seed)
    lay = TokenLayout.build([("v", nv)], m, 2)
    keep = np.sort(np.concatenate([rng.choice(nv, size=rng.integers(1, nv + 1), replace=False),
                                   lay.protected_indices()]))
    w = random_attention(rng, heads, keep.size)
    got = task_attention_score(single_record(w, keep), lay, 1)
    ref = naive_score(w, keep, lay.text_indices(), keep[keep < nv])
    assert got.indices.tolist() == sorted(ref)
    np.testing.assert_allclose(got.scores, [ref[i] for i in got.indices], rtol=1e-12, atol=0)


def test_literal_direction_reads_visual_rows():
    lay = TokenLayout.build([("v", 2)], 1, 0)
    w = np.zeros((1, 3, 3))
    w[0, 1, 2] = 0.6   # visual token 1 attends to the text token
    w[0, 2, 1] = 0.2   # text token attends to visual token 1
    rec = single_record(w)
    assert task_attention_score(rec, lay, 1).as_dict()[1] == pytest.approx(0.2)
    assert task_attention_score(rec, lay, 1, VISUAL_TO_TEXT).as_dict()[1] == pytest.approx(0.6)
    with pytest.raises(ValueError):
        task_attention_score(rec, lay, 1, "sideways")


def test_errors():
    lay = TokenLayout.build([("v", 3)], 0, 1)
    with pytest.raises(ValueError):
        scores_from_attention(np.ones((1, 4, 4)) / 4, np.arange(4), lay)
    with pytest.raises(KeyError):
        task_attention_score(AttentionRecord(), lay, 1)


def test_top_k():
    s = TokenScoreVector([0, 1, 2], [0.1, 0.5, 0.3])
    assert set(top_k_tokens(s, 2).tolist()) == {1, 2}
    assert top_k_tokens(TokenScoreVector([0, 1, 2], [0.2] * 3), 2).tolist() == [0, 1]
    assert top_k_tokens(s, 0).size == 0
    assert top_k_tokens(s, 10).size == 3
    with pytest.raises(ValueError):
        top_k_tokens(s, -1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 1)), min_size=1, max_size=30),
       st.integers(0, 40), st.integers(-20, 20))
def test_top_k_scale_invariant(values, k, e):
    # powers of two scale exactly, so ties survive
    s = TokenScoreVector(np.arange(len(values)), values)
    scaled = TokenScoreVector(np.arange(len(values)), np.asarray(values) * 2.0 ** e)
    assert top_k_tokens(s, k).tolist() == top_k_tokens(scaled, k).tolist()


def test_top_k_per_view_splits_budget():
    lay = TokenLayout.build([("a", 4), ("b", 4)], 1, 0)
    s = TokenScoreVector(np.arange(8), [9, 8, 7, 6, 1, 2, 3, 4])
    assert top_k_per_view(s, lay, 2).tolist() == [0, 1, 6, 7]


def layered_record(rng, layers, lay):
    rec = AttentionRecord()
    for l in layers:
        rec.add(l, random_attention(rng, 2, lay.seq_len), np.arange(lay.seq_len))
    return rec


def test_hit_rate_edges():
    lay = TokenLayout.build([("v", 10)], 2, 1)
    rec = layered_record(np.random.default_rng(0), (1, 2, 3), lay)
    assert hit_rate((3,), 3, rec, lay, 4) == 1.0
    w = np.zeros((1, lay.seq_len, lay.seq_len))
    w[:, 10:12, 0:3] = 1.0
    w2 = np.zeros_like(w)
    w2[:, 10:12, 5:8] = 1.0
    rec = AttentionRecord()
    rec.add(1, w, np.arange(lay.seq_len))
    rec.add(2, w2, np.arange(lay.seq_len))
    assert hit_rate((1,), 2, rec, lay, 3) == 0.0
    with pytest.raises(KeyError):
        hit_rate((5,), 2, rec, lay, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**20), st.integers(1, 12))
def test_hit_rate_monotone_in_early_layers(seed, k):
    lay = TokenLayout.build([("v", 12)], 3, 1)
    rec = layered_record(np.random.default_rng(seed), (1, 2, 3, 4), lay)
    h1 = hit_rate((1,), 4, rec, lay, k)
    h12 = hit_rate((1, 2), 4, rec, lay, k)
    h123 = hit_rate((1, 2, 3), 4, rec, lay, k)
    assert 0.0 <= h1 <= h12 <= h123 <= 1.0
