import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apexseg.autodiff import Tensor
from apexseg.decoder import (DecoderLayer, QuerySet, attention_mask_from_logits, decoder_layer, level_schedule,
                             run_decoders)
from apexseg.mixing import IDENTITY, MEAN, QueryMixer
from apexseg.nn import MultiHeadAttention

from helpers import decoders, embeddings


def test_all_permissive_mask_equals_plain_attention(rng):
    J = embeddings()
    layer = DecoderLayer(16, 4, 32, rng)
    q = QuerySet(Tensor(rng.normal(size=(2, 5, 16))), "pathology", 0)
    permit = np.ones((2, 5, 64), bool)
    a = decoder_layer(layer, q, J, 1, permit).queries.data
    b = decoder_layer(layer, q, J, 1, None).queries.data
    np.testing.assert_array_equal(a, b)


def test_single_permitted_key_returns_its_value_projection(rng):
    attn = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.normal(size=(1, 3, 8)))
    kv = rng.normal(size=(1, 6, 8))
    forbid = np.ones((1, 3, 6), bool)
    chosen = [4, 0, 2]
    for i, j in enumerate(chosen):
        forbid[0, i, j] = False
    out, w = attn(q, Tensor(kv), Tensor(kv), forbid)
    v = attn.out_proj(attn.v_proj(Tensor(kv))).data[0]
    np.testing.assert_allclose(out.data[0], v[chosen], atol=1e-12)
    np.testing.assert_array_equal(w[0, :, np.arange(3), chosen], 1.0)


def test_key_permutation_with_mask_columns_is_invariant(rng):
    J = embeddings()
    layer = DecoderLayer(16, 4, 32, rng)
    q = Tensor(rng.normal(size=(2, 5, 16)))
    tokens, pos = J.tokens[0], J.pos[0]
    permit = rng.random((2, 5, 64)) < 0.5
    permit[..., 0] = True
    perm = rng.permutation(64)
    a = layer(q, tokens, pos, permit).data
    b = layer(q, tokens[:, perm], pos[perm], permit[..., perm]).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_negative_logits_give_empty_mask_and_fallback():
    permit, fb = attention_mask_from_logits(np.full((1, 2, 4, 4), -3.0), (2, 2))
    assert fb.all() and permit.all()


def test_infinite_logits_permit_everything():
    permit, fb = attention_mask_from_logits(np.full((1, 1, 4, 4), np.inf), (4, 4))
    assert permit.all() and not fb.any()


def test_checkerboard_selects_positive_cells():
    board = np.where((np.add.outer(np.arange(4), np.arange(4)) % 2) == 0, 1.0, -1.0)
    permit, fb = attention_mask_from_logits(board[None, None], (4, 4))
    np.testing.assert_array_equal(permit[0, 0], (board > 0).ravel())
    assert not fb.any()


@given(st.integers(0, 2**31 - 1))
def test_fallback_iff_no_permitted_pixel(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 4, 4)) - rng.uniform(0, 3)
    permit, fb = attention_mask_from_logits(logits, (2, 2))
    pooled = logits.reshape(2, 3, 2, 2, 2, 2).mean(axis=(3, 5)).reshape(2, 3, 4)
    np.testing.assert_array_equal(fb, ~(pooled >= 0).any(axis=2))


def test_masked_attention_rows_sum_to_one_over_permitted_keys(rng):
    attn = MultiHeadAttention(8, 2, rng)
    forbid = rng.random((2, 4, 7)) < 0.6
    forbid[..., 3] = False
    _, w = attn(Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 7, 8))),
                Tensor(rng.normal(size=(2, 7, 8))), forbid)
    allowed = ~forbid[:, None]
    np.testing.assert_allclose((w * allowed).sum(-1), 1.0, atol=1e-12)
    assert (w * ~allowed).max() < 1e-300


def test_level_schedule_cycles_coarse_to_fine():
    assert level_schedule(6, 3) == [3, 2, 1, 3, 2, 1]
    assert level_schedule(0, 3) == []


def test_zero_layers_returns_initial_queries():
    J = embeddings()
    ana, path = decoders(layers=0)
    qa, qp, trace = run_decoders(J, ana, path)
    np.testing.assert_array_equal(qa.data[0], ana.query_embed.data)
    np.testing.assert_array_equal(qp.data[1], path.query_embed.data)
    assert len(trace.anatomy) == 1


def test_identical_branches_produce_identical_traces():
    J = embeddings()
    ana, path = decoders(classes=(3, 3))
    path.load_state_dict(ana.state_dict())
    _, _, trace = run_decoders(J, ana, path, QueryMixer(IDENTITY))
    for a, p in zip(trace.anatomy, trace.pathology):
        np.testing.assert_array_equal(a.data, p.data)


def test_mean_mixer_halves_pathology_when_anatomy_is_zero():
    J = embeddings()
    ana, path = decoders()
    # zero the last norm of the first anatomy layer so anatomy queries become 0
    ana.layers[0].norm_ffn.gamma.data[:] = 0.0
    ana.layers[0].norm_ffn.beta.data[:] = 0.0
    _, _, t_id = run_decoders(J, ana, path, QueryMixer(IDENTITY))
    _, _, t_mean = run_decoders(J, ana, path, QueryMixer(MEAN))
    assert not t_mean.anatomy[1].data.any()
    np.testing.assert_allclose(t_mean.pathology[1].data, t_id.pathology[1].data / 2, atol=1e-15)


def test_branches_have_disjoint_parameters():
    ana, path = decoders()
    ids_a = {id(p) for p in ana.parameters()}
    assert ids_a.isdisjoint({id(p) for p in path.parameters()})


def test_mask_shape_mismatch_is_rejected(rng):
    J = embeddings()
    layer = DecoderLayer(16, 4, 32, rng)
    q = QuerySet(Tensor(rng.normal(size=(2, 5, 16))), "pathology", 0)
    with pytest.raises(ValueError, match="attention mask"):
        decoder_layer(layer, q, J, 1, np.ones((2, 5, 10), bool))
