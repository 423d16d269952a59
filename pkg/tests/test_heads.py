import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_grads
from recam import tensor as T
from recam.attention import MultiHeadParams
from recam.encoder import SEG_P, SEG_PAD, SEG_QO, EncodedChoices
from recam.errors import ConfigurationError, DataError, DegenerateInputError, DimensionError
from recam.heads import (BiAttnHead, HeadKind, SoftmaxHead, UniAttnHead, bi_attention,
                         bi_attention_head, make_head, multi_sample_dropout_score, softmax_head,
                         split_segments, uni_attention_head)
from recam.tensor import RandomSource, Tensor

from test_attention import loop_attention


def encoded(rng, n_qo, n_p, length=None, d=8, batch=None, grad=False):
    """Random encoder output whose rows hold ``n_qo`` QO then ``n_p`` P positions, then padding."""
    length = length or n_qo + n_p + 2
    seg = np.full((5, length), SEG_PAD, dtype=np.int8)
    seg[:, :n_qo] = SEG_QO
    seg[:, n_qo:n_qo + n_p] = SEG_P
    shape = (5, length, d) if batch is None else (batch, 5, length, d)
    if batch is not None:
        seg = np.broadcast_to(seg, (batch, 5, length)).copy()
    emb = rng.standard_normal(shape)
    emb = T.parameter(emb) if grad else Tensor(emb)
    return EncodedChoices(emb, seg, seg != SEG_PAD)


def head(kind, d=8, h=2, seed=0, **kw):
    return make_head(kind, d, h, RandomSource(seed), init_std=0.5, **kw)


ALL_KINDS = [HeadKind.SOFTMAX, HeadKind.UNI_ATTN, HeadKind.BI_ATTN]


# -- segment split -------------------------------------------------------------------

def test_split_counts_and_reassembly():
    enc = encoded(np.random.default_rng(0), 10, 20, length=34)
    splits = split_segments(enc)
    assert len(splits) == 5
    for row, s in enumerate(splits):
        assert s.e_qo.shape == (10, 8) and s.e_p.shape == (20, 8)
        rebuilt = np.zeros((30, 8))
        rebuilt[s.qo_positions] = s.e_qo.data
        rebuilt[s.p_positions] = s.e_p.data
        assert np.array_equal(rebuilt, enc.embeddings.data[row, :30])


def test_empty_passage_degenerates_downstream():
    enc = encoded(np.random.default_rng(1), 4, 0)
    splits = split_segments(enc)
    assert splits[0].e_p.shape == (0, 8)
    h = head("bi-attn")
    with pytest.raises(DegenerateInputError):
        bi_attention_head(splits, h)
    with pytest.raises(DegenerateInputError):
        h.forward(enc)


def test_empty_question_segment_is_data_error():
    enc = encoded(np.random.default_rng(1), 0, 4)
    with pytest.raises(DataError):
        split_segments(enc)


# -- shared head behaviour -------------------------------------------------------------

@pytest.mark.parametrize("kind", ALL_KINDS)
def test_distribution_normalised_and_eval_deterministic(kind):
    enc = encoded(np.random.default_rng(2), 3, 6)
    h = head(kind)
    a, b = h.forward(enc), h.forward(enc)
    dist = a.distribution.data
    assert abs(dist.sum() - 1.0) <= 1e-6 and np.all((dist > 0) & (dist < 1))
    assert np.array_equal(a.logits.data, b.logits.data)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_eval_invariant_to_sample_count(kind):
    enc = encoded(np.random.default_rng(3), 3, 5)
    a = head(kind, dropout_samples=1).forward(enc).logits.data
    b = head(kind, dropout_samples=9).forward(enc).logits.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", ALL_KINDS)
@settings(max_examples=50)
@given(perm=st.permutations(range(5)), seed=st.integers(0, 2**31))
def test_option_permutation_equivariance(kind, perm, seed):
    enc = encoded(np.random.default_rng(seed), 3, 4, length=9)
    h = head(kind)
    base = h.forward(enc).logits.data
    permuted = EncodedChoices(Tensor(enc.embeddings.data[list(perm)]), enc.segments[list(perm)],
                              enc.attention_mask[list(perm)])
    out = h.forward(permuted).logits.data
    assert np.array_equal(out, base[list(perm)])
    assert int(np.argmax(out)) == list(perm).index(int(np.argmax(base)))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_head_gradients(kind):
    rng = np.random.default_rng(4)
    enc = encoded(rng, 3, 4, length=9, d=4, batch=2, grad=True)
    h = head(kind, d=4, h=2, seed=5)
    target = np.array([1, 3])
    params = list(h.named_parameters().values()) + [enc.embeddings]
    check_grads(lambda: T.cross_entropy(h.forward(enc).logits, target), params)


def test_bi_attention_training_gradients_with_fixed_masks():
    rng = np.random.default_rng(6)
    enc = encoded(rng, 2, 3, d=4, grad=True)
    h = head("bi-attn", d=4, seed=7)
    params = list(h.named_parameters().values()) + [enc.embeddings]
    check_grads(lambda: T.cross_entropy(h.forward(enc, True, RandomSource(11)).logits[None],
                                        np.array([2])), params)


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        HeadKind.parse("tri-attn")
    assert HeadKind.parse("BiAttn") is HeadKind.BI_ATTN


def test_bad_dropout_rate():
    with pytest.raises(ConfigurationError):
        head("softmax", dropout_rate=1.0)


# -- bi-directional attention -------------------------------------------------------

def test_single_token_segments_closed_form():
    rng = np.random.default_rng(7)
    d = 4
    e_p, e_qo = rng.standard_normal((1, d)), rng.standard_normal((1, d))
    h = head("bi-attn", d=d)
    mha1, mha2, fusion = bi_attention(Tensor(e_p), Tensor(e_qo), h.attn_p, h.attn_qo)
    expected1 = e_qo[0] @ h.attn_p.w_v.data @ h.attn_p.w_o.data
    expected2 = e_p[0] @ h.attn_qo.w_v.data @ h.attn_qo.w_o.data
    np.testing.assert_allclose(fusion.data, np.concatenate([expected1, expected2]), atol=1e-12)


def multi_head_oracle(p: MultiHeadParams, q, kv):
    h, d = p.num_heads, q.shape[1]
    parts = []
    for i in range(h):
        cols = slice(i * d // h, (i + 1) * d // h)
        parts.append(loop_attention(q @ p.w_q.data[:, cols], kv @ p.w_k.data[:, cols],
                                    kv @ p.w_v.data[:, cols]))
    return np.concatenate(parts, axis=1) @ p.w_o.data


def test_bi_attention_matches_oracle_and_batched_path():
    rng = np.random.default_rng(8)
    enc = encoded(rng, 3, 5, length=10)
    h = head("bi-attn")
    splits = split_segments(enc)
    ref = h.forward_splits(splits)
    batched = h.forward(enc)
    np.testing.assert_allclose(batched.logits.data, ref.logits.data, atol=1e-12)
    for row, s in enumerate(splits):
        m1 = multi_head_oracle(h.attn_p, s.e_p.data, s.e_qo.data).mean(axis=0)
        m2 = multi_head_oracle(h.attn_qo, s.e_qo.data, s.e_p.data).mean(axis=0)
        o = np.concatenate([m1, m2])
        assert ref.pooled.shape[-1] == 16
        np.testing.assert_allclose(ref.pooled.data[row], o, atol=1e-12)
        np.testing.assert_allclose(ref.logits.data[row], o @ h.w_t.data, atol=1e-12)


def test_pooled_widths_and_parameter_ratio():
    uni = make_head("uni-attn", 1024, 16, RandomSource(0), init_std=0.02)
    bi = make_head("bi-attn", 1024, 16, RandomSource(0), init_std=0.02)
    assert bi.pooled_width == 2 * uni.pooled_width == 2048
    assert bi.attention_parameter_count() == 2 * uni.attention_parameter_count()
    assert 4.0e6 < uni.attention_parameter_count() < 4.4e6


# -- uni-directional attention and baseline ---------------------------------------------

def test_uni_single_token_pool():
    rng = np.random.default_rng(9)
    enc = encoded(rng, 1, 0, length=3)
    h = head("uni-attn")
    act = uni_attention_head(enc, h)
    for row in range(5):
        x = enc.embeddings.data[row, 0]
        np.testing.assert_allclose(act.pooled.data[row], x @ h.attn.w_v.data @ h.attn.w_o.data,
                                   atol=1e-12)


def test_uni_composition_oracle():
    rng = np.random.default_rng(10)
    enc = encoded(rng, 3, 4, length=10)
    h = head("uni-attn")
    act = uni_attention_head(enc, h)
    for row in range(5):
        valid = enc.attention_mask[row]
        x = enc.embeddings.data[row]
        out = multi_head_oracle(h.attn, x[valid], x[valid])
        pooled = out.mean(axis=0)
        assert abs(act.logits.data[row] - float(pooled @ h.w_t.data)) < 1e-10


def test_uni_all_padding_row():
    enc = encoded(np.random.default_rng(0), 2, 2)
    enc.attention_mask[1] = False
    with pytest.raises(DegenerateInputError):
        head("uni-attn").forward(enc)


def test_softmax_identical_rows_uniform():
    row = np.random.default_rng(11).standard_normal((6, 8))
    seg = np.full((5, 6), SEG_QO, dtype=np.int8)
    enc = EncodedChoices(Tensor(np.tile(row, (5, 1, 1))), seg, seg != SEG_PAD)
    dist = softmax_head(enc, head("softmax")).distribution.data
    np.testing.assert_allclose(dist, np.full(5, 0.2), atol=1e-15)


def test_softmax_dot_oracle():
    enc = encoded(np.random.default_rng(12), 2, 3)
    h = head("softmax")
    act = h.forward(enc)
    expected = enc.embeddings.data[:, 0, :] @ h.w_t.data
    np.testing.assert_allclose(act.logits.data, expected, rtol=0, atol=1e-12)
    z = np.exp(expected - expected.max())
    np.testing.assert_allclose(act.distribution.data, z / z.sum(), atol=1e-12)


# -- multi-sample dropout -------------------------------------------------------------

def test_dropout_score_eval_and_zero_rate():
    rng = np.random.default_rng(13)
    o, w = Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal(6))
    plain = o.data @ w.data
    np.testing.assert_allclose(multi_sample_dropout_score(o, w, 0.5, 5, False, None).data, plain,
                               atol=1e-12)
    np.testing.assert_allclose(multi_sample_dropout_score(o, w, 0.0, 5, True, RandomSource(0)).data,
                               plain, atol=1e-12)


def test_dropout_score_training_changes_and_averages():
    rng = np.random.default_rng(14)
    o, w = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    src = RandomSource(0)
    draws = np.array([multi_sample_dropout_score(o, w, 0.5, 5, True, src).data
                      for _ in range(10_000)])
    plain = float(o.data @ w.data)
    assert len(np.unique(draws)) > 1
    assert abs(draws.mean() - plain) <= 0.02 * abs(plain)


def test_dropout_score_width_mismatch():
    with pytest.raises(DimensionError):
        multi_sample_dropout_score(Tensor(np.ones(3)), Tensor(np.ones(4)), 0.5, 5, False, None)


def test_head_classes():
    assert isinstance(head("softmax"), SoftmaxHead)
    assert isinstance(head("uni"), UniAttnHead)
    assert isinstance(head("bi"), BiAttnHead)
