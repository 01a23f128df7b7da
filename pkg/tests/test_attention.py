import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iclcontrast.attention import (
    AttentionWeights,
    ModelConfig,
    TokenSequence,
    attention_weights,
    decode_argmax,
    embed,
    embedding_table,
    forward,
    self_attention,
    softmax,
)
from iclcontrast.errors import EmptyInputError, NumericError, ShapeError, ValidationError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_single_key_value_returns_value():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 5))
    out = self_attention(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), v, 0.5)
    assert np.array_equal(out, np.repeat(v, 3, axis=0))


def test_zero_scores_average_values():
    q = np.zeros((2, 3))
    k = np.ones((2, 3))
    v = np.array([[0.0, 2.0], [2.0, 0.0]])
    # q @ k.T is zero, so attention is uniform
    assert np.allclose(self_attention(q, k, v, 1.0), [[1.0, 1.0], [1.0, 1.0]], atol=0)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1987)
    h = rng.normal(size=(4, 8))
    a = attention_weights(h, h, 1 / np.sqrt(8))
    assert np.all(a >= 0)
    assert np.max(np.abs(a.sum(axis=1) - 1.0)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=finite), arrays(np.float64, (4, 3), elements=finite),
       st.permutations(range(4)))
def test_key_value_permutation_invariance(q, k, perm):
    v = np.arange(8.0).reshape(4, 2)
    perm = list(perm)
    a = self_attention(q, k, v, 0.7)
    b = self_attention(q, k[perm], v[perm], 0.7)
    assert np.allclose(a, b, atol=1e-12)


def test_shape_and_numeric_errors():
    with pytest.raises(ShapeError):
        self_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 2)), 1.0)
    with pytest.raises(ShapeError):
        self_attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 2)), 1.0)
    with pytest.raises(NumericError):
        self_attention(np.array([[np.nan, 0.0]]), np.ones((1, 2)), np.ones((1, 2)), 1.0)
    with pytest.raises(ValidationError):
        self_attention(np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)), 0.0)


def test_token_sequence_invariants():
    with pytest.raises(ShapeError):
        TokenSequence([1, 2], ["query"])
    with pytest.raises(ValidationError):
        TokenSequence([1], ["context"])
    with pytest.raises(ShapeError):
        TokenSequence([1, 2], ["query", "answer"], embeddings=np.zeros((3, 4)))


def test_attention_weights_validation():
    with pytest.raises(ShapeError):
        AttentionWeights(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)))
    with pytest.raises(NumericError):
        AttentionWeights(np.zeros((2, 2)), np.full((2, 2), np.inf), np.zeros((2, 2)), np.zeros((2, 2)))


def test_model_config_defaults():
    cfg = ModelConfig(depth=16)
    assert cfg.scale == 0.25
    assert cfg.seed == 1987
    with pytest.raises(ValidationError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValidationError):
        ModelConfig(scale=-1.0)


def test_embedding_table_is_seeded_and_extends():
    small = embedding_table(5, 8, 1987)
    large = embedding_table(9, 8, 1987)
    assert np.array_equal(small, large[:5])
    assert abs(large.std() - 1 / np.sqrt(8)) < 0.15


def test_forward_single_layer_is_self_attention():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(depth=6)
    wt = AttentionWeights.random(6, rng)
    seq = TokenSequence([0, 4, 2, 1], ["instruction", "example", "query", "answer"])
    h = embed(seq, cfg)
    expected = self_attention(h @ wt.w_q.T, h @ wt.w_k.T, h @ wt.w_v.T, cfg.scale)
    (out,) = forward(seq, [wt], cfg)
    assert np.array_equal(out, expected)


def test_forward_is_deterministic():
    cfg = ModelConfig(depth=5, n_layers=3)
    seq = TokenSequence([3, 1, 2], ["example", "query", "answer"])
    w1 = [AttentionWeights.random(5, np.random.default_rng(11))]
    w2 = [AttentionWeights.random(5, np.random.default_rng(11))]
    a, b = forward(seq, w1, cfg), forward(seq, w2, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_forward_two_layers_matches_manual_composition():
    rng = np.random.default_rng(5)
    d = 4
    cfg = ModelConfig(depth=d, n_layers=2)
    emb = rng.normal(size=(3, d))
    seq = TokenSequence([0, 1, 2], ["example", "query", "answer"], embeddings=emb)
    ws = [AttentionWeights.random(d, rng), AttentionWeights.random(d, rng)]

    def layer(h, wt):
        s = (h @ wt.w_q.T) @ (h @ wt.w_k.T).T / np.sqrt(d)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        return (p / p.sum(axis=1, keepdims=True)) @ (h @ wt.w_v.T)

    h1 = layer(emb, ws[0])
    h2 = layer(h1, ws[1])
    out = forward(seq, ws, cfg)
    assert len(out) == 2
    assert np.max(np.abs(out[0] - h1)) <= 1e-12
    assert np.max(np.abs(out[1] - h2)) <= 1e-12


def test_forward_empty_sequence():
    with pytest.raises(EmptyInputError):
        forward(TokenSequence([], []), [AttentionWeights.random(2, np.random.default_rng(0))], ModelConfig(depth=2))


def test_decode_argmax_examples():
    assert decode_argmax([0.1, 0.9, 0.3]) == 1
    assert decode_argmax([2.0, 2.0, 2.0]) == 0
    with pytest.raises(EmptyInputError):
        decode_argmax([])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-100, 100))
def test_decode_argmax_shift_and_softmax_invariance(logits, c):
    idx = decode_argmax(logits)
    assert idx == int(np.flatnonzero(logits == logits.max())[0])
    top2 = np.sort(logits)[-2:]
    assume(logits.size == 1 or top2[1] - top2[0] > 1e-6)
    assert decode_argmax(softmax(logits)) == idx
    assert decode_argmax(logits + c) == idx
