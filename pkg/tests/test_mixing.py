import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apexseg.autodiff import Tensor
from apexseg.decoder import run_decoders
from apexseg.mixing import (CROSS_ATTENTION, CROSS_ATTENTION_PER_LEVEL, IDENTITY, KINDS, MEAN, SUM, SUM_2WAY,
                            AttendedEntry, QueryMixer, attended_anatomy_report, mix)

from helpers import decoders, embeddings


def _randomize(mixer, rng):
    for p in mixer.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    return mixer


def test_parameter_free_kinds_have_no_parameters():
    for kind in (IDENTITY, SUM, SUM_2WAY, MEAN):
        assert QueryMixer(kind).num_parameters() == 0


def test_attention_kinds_parameter_bundles():
    one = QueryMixer(CROSS_ATTENTION, d=16, num_stages=6).num_parameters()
    per = QueryMixer(CROSS_ATTENTION_PER_LEVEL, d=16, num_stages=6).num_parameters()
    assert one > 0 and per == 6 * one


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown mixing strategy"):
        QueryMixer("concat")


def test_query_count_mismatch_rejected(rng):
    with pytest.raises(ValueError, match="differ in shape"):
        mix(Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 5, 8))), 0, QueryMixer(SUM))


def test_sum_with_zero_anatomy_is_identity(rng):
    qp = Tensor(rng.normal(size=(2, 5, 8)))
    _, out, _ = mix(Tensor(np.zeros((2, 5, 8))), qp, 0, QueryMixer(SUM))
    np.testing.assert_array_equal(out.data, qp.data)


def test_mean_fixed_point(rng):
    q = rng.normal(size=(2, 5, 8))
    _, out, _ = mix(Tensor(q), Tensor(q.copy()), 0, QueryMixer(MEAN))
    np.testing.assert_array_equal(out.data, q)


def test_sum_2way_updates_both_branches(rng):
    qa, qp = rng.normal(size=(2, 1, 3, 4))
    a, p, _ = mix(Tensor(qa), Tensor(qp), 0, QueryMixer(SUM_2WAY))
    np.testing.assert_array_equal(a.data, qa + qp)
    np.testing.assert_array_equal(p.data, qa + qp)


@pytest.mark.parametrize("kind", [k for k in KINDS if k != SUM_2WAY])
def test_anatomy_passes_through_untouched(kind, rng):
    qa = Tensor(rng.normal(size=(2, 5, 16)))
    a, _, _ = mix(qa, Tensor(rng.normal(size=(2, 5, 16))), 0, QueryMixer(kind, d=16, num_stages=1, rng=rng))
    assert a is qa


def test_cross_attention_at_init_is_normalized_identity(rng):
    mixer = QueryMixer(CROSS_ATTENTION, d=16, rng=rng)
    qp = Tensor(rng.normal(size=(2, 5, 16)))
    _, out, w = mix(Tensor(rng.normal(size=(2, 5, 16))), qp, 0, mixer)
    np.testing.assert_allclose(out.data, mixer.blocks[0].norm(qp).data, atol=1e-12)
    assert w.shape == (2, 4, 5, 5)


def test_cross_attention_invariant_to_anatomy_row_order(rng):
    mixer = _randomize(QueryMixer(CROSS_ATTENTION, d=16, rng=rng), rng)
    qa, qp = rng.normal(size=(2, 2, 5, 16))
    perm = rng.permutation(5)
    _, a, _ = mix(Tensor(qa), Tensor(qp), 0, mixer)
    _, b, _ = mix(Tensor(qa[:, perm]), Tensor(qp), 0, mixer)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_per_level_uses_stage_weights(rng):
    mixer = _randomize(QueryMixer(CROSS_ATTENTION_PER_LEVEL, d=16, num_stages=2, rng=rng), rng)
    qa, qp = (Tensor(x) for x in rng.normal(size=(2, 1, 5, 16)))
    assert not np.allclose(mix(qa, qp, 0, mixer)[1].data, mix(qa, qp, 1, mixer)[1].data)
    with pytest.raises(IndexError):
        mix(qa, qp, 2, mixer)


@given(st.integers(0, 2**31 - 1), st.sampled_from([SUM, MEAN]))
def test_elementwise_mixers_commute_with_row_permutation(seed, kind):
    rng = np.random.default_rng(seed)
    qa, qp = rng.normal(size=(2, 1, 6, 4))
    perm = rng.permutation(6)
    _, a, _ = mix(Tensor(qa), Tensor(qp), 0, QueryMixer(kind))
    _, b, _ = mix(Tensor(qa[:, perm]), Tensor(qp[:, perm]), 0, QueryMixer(kind))
    np.testing.assert_array_equal(a.data[:, perm], b.data)


@given(st.integers(0, 2**31 - 1))
def test_attention_mass_per_query_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    mixer = _randomize(QueryMixer(CROSS_ATTENTION, d=8, heads=2, rng=rng), rng)
    _, _, w = mix(Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 3, 8))), 0, mixer)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", [k for k in KINDS if k != SUM_2WAY])
def test_anatomy_trace_bit_identical_across_mixers(kind):
    J = embeddings()
    ana, path = decoders()
    _, _, ref = run_decoders(J, ana, path, QueryMixer(IDENTITY))
    mixer = _randomize(QueryMixer(kind, d=16, num_stages=6, rng=np.random.default_rng(3)), np.random.default_rng(4))
    _, _, got = run_decoders(J, ana, path, mixer)
    for a, b in zip(ref.anatomy, got.anatomy):
        np.testing.assert_array_equal(a.data, b.data)


def test_sum_2way_changes_anatomy_trace():
    J = embeddings()
    ana, path = decoders()
    _, _, ref = run_decoders(J, ana, path, QueryMixer(IDENTITY))
    _, _, got = run_decoders(J, ana, path, QueryMixer(SUM_2WAY))
    assert not np.array_equal(ref.anatomy[-1].data, got.anatomy[-1].data)


# attended-anatomy report

def test_report_single_query():
    assert attended_anatomy_report([np.ones((3, 1))], np.array([4])) == [AttendedEntry(4, 1.0)]


def test_report_uniform_attention():
    rep = attended_anatomy_report([np.full((2, 4), 0.25)], np.array([1, 2, 3, 4]))
    assert [e.anatomy_class for e in rep] == [1, 2, 3, 4]
    np.testing.assert_allclose([e.mass for e in rep], 0.25)


def test_report_large_k_returns_full_ranking_without_padding():
    w = np.array([[0.5, 0.3, 0.2]])
    rep = attended_anatomy_report([w], np.array([2, 1, 2]), k=10)
    assert rep == [AttendedEntry(2, pytest.approx(0.7)), AttendedEntry(1, pytest.approx(0.3))]


def test_report_rejects_non_attention_strategy():
    with pytest.raises(ValueError, match="attention-based"):
        attended_anatomy_report([np.ones((1, 1))], np.array([0]), strategy=QueryMixer(SUM))


def test_report_drops_unmatched_and_averages_heads_and_stages():
    w1 = np.zeros((1, 2, 1, 2))
    w1[0, 0, 0] = [1.0, 0.0]
    w1[0, 1, 0] = [0.0, 1.0]
    w2 = np.zeros((1, 2, 1, 2))
    w2[0, :, 0] = [1.0, 0.0]
    rep = attended_anatomy_report([w1, w2], np.array([[3, -1]]))
    assert rep == [AttendedEntry(3, pytest.approx(0.75))]
