import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnsynth import damsm
from attnsynth import tensor as T
from attnsynth.image_encoder import ImageBatch
from attnsynth.tensor import ContractError, Tensor, grad_check
from attnsynth.text_encoder import TextBatch

import oracles


def _batch(rng, M, D, Tw, N):
    ib = ImageBatch(Tensor(rng.standard_normal((M, D, N))), Tensor(rng.standard_normal((M, D))))
    tb = TextBatch(Tensor(rng.standard_normal((M, D, Tw))), Tensor(rng.standard_normal((M, D))),
                   np.ones((M, Tw), dtype=bool))
    return ib, tb


# -- similarity and normalization ---------------------------------------------

def test_similarity_identity():
    assert np.array_equal(damsm.similarity_matrix(Tensor(np.eye(2)), Tensor(np.eye(2))).data, np.eye(2))


def test_similarity_dot():
    s = damsm.similarity_matrix(Tensor([[1.0], [1.0]]), Tensor([[2.0], [3.0]]))
    assert s.data[0, 0] == 5.0


def test_similarity_bilinear():
    rng = np.random.default_rng(0)
    e, v = rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
    np.testing.assert_allclose(damsm.similarity_matrix(Tensor(2 * e), Tensor(v)).data,
                               2 * damsm.similarity_matrix(Tensor(e), Tensor(v)).data, rtol=1e-14)


def test_normalize_single_word():
    assert np.all(damsm.normalize_over_words(Tensor(np.random.default_rng(1).standard_normal((1, 4)))).data == 1.0)


def test_normalize_ln3():
    out = damsm.normalize_over_words(Tensor([[0.0], [math.log(3)]])).data[:, 0]
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)


# -- region context -----------------------------------------------------------

def test_region_context_single_region():
    v = Tensor([[1.0], [2.0]])
    c, a = damsm.region_context(Tensor(np.random.default_rng(2).uniform(size=(3, 1))), v, 5.0)
    assert np.all(a.data == 1.0)
    np.testing.assert_allclose(c.data, np.repeat(v.data, 3, axis=1))


def test_region_context_uniform_row_gives_mean():
    v = np.random.default_rng(3).standard_normal((2, 4))
    c, a = damsm.region_context(Tensor(np.full((1, 4), 0.25)), Tensor(v), 5.0)
    np.testing.assert_allclose(a.data, 0.25)
    np.testing.assert_allclose(c.data[:, 0], v.mean(axis=1), rtol=1e-13)


def test_region_context_sharp_limit():
    v = np.random.default_rng(4).standard_normal((3, 4))
    s_bar = np.array([[0.1, 0.2, 0.6, 0.1]])
    c, _ = damsm.region_context(Tensor(s_bar), Tensor(v), 50.0)
    # direct softmax evaluation as the limit oracle
    w = oracles.softmax([50 * x for x in s_bar[0]])
    assert w[2] > 1 - 1e-6
    np.testing.assert_allclose(c.data[:, 0], v[:, 2], atol=1e-5)
    np.testing.assert_allclose(c.data[:, 0], v @ np.array(w), atol=1e-12)


# -- match score --------------------------------------------------------------

def test_match_single_word():
    rng = np.random.default_rng(5)
    e, c = Tensor(rng.standard_normal((4, 1))), Tensor(rng.standard_normal((4, 1)))
    m = damsm.match_score(e, c, 5.0)
    assert m.score.item() == pytest.approx(m.per_word.data[0], abs=1e-14)


@pytest.mark.parametrize("Tw", [1, 2, 5, 9])
def test_match_equal_relevances_closed_form(Tw):
    e = np.random.default_rng(6).standard_normal((4, Tw))
    e *= 2.0 / np.linalg.norm(e, axis=0)  # equal norms -> equal guarded cosines
    m = damsm.match_score(Tensor(e), Tensor(e.copy()), 5.0)
    r = m.per_word.data
    assert np.ptp(r) < 1e-15
    assert r[0] == pytest.approx(1.0, abs=1e-8)  # cosine guard epsilon
    assert abs(m.score.item() - (r[0] + math.log(Tw) / 5.0)) <= 1e-12


def test_match_large_gamma_approaches_max():
    rng = np.random.default_rng(7)
    e, c = Tensor(rng.standard_normal((6, 8))), Tensor(rng.standard_normal((6, 8)))
    m = damsm.match_score(e, c, 100.0)
    assert abs(m.score.item() - m.per_word.data.max()) <= 0.05


def test_match_zero_norm_flagged():
    e = Tensor(np.ones((3, 2)))
    c = Tensor(np.zeros((3, 2)))
    m = damsm.match_score(e, c, 5.0)
    assert m.zero_norm and np.all(np.isfinite(m.per_word.data))


def test_match_matches_bruteforce_pipeline():
    rng = np.random.default_rng(8)
    e, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    s_bar = damsm.normalize_over_words(damsm.similarity_matrix(Tensor(e), Tensor(v)))
    c, _ = damsm.region_context(s_bar, Tensor(v), 5.0)
    ours = damsm.match_score(Tensor(e), c, 5.0)
    ref, r = oracles.match_score(e.tolist(), v.tolist(), 5.0, 5.0)
    np.testing.assert_allclose(ours.per_word.data, r, atol=1e-7)
    assert ours.score.item() == pytest.approx(ref, abs=1e-7)


# -- sentence score and posterior ---------------------------------------------

def test_sentence_score_cases():
    a = Tensor([1.0, 2.0, 2.0])
    assert damsm.sentence_score(a, a).item() == pytest.approx(1.0, abs=1e-8)
    assert damsm.sentence_score(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == 0.0
    assert damsm.sentence_score(a, a * -1.0).item() == pytest.approx(-1.0, abs=1e-8)


def test_posterior_single():
    assert damsm.batch_posterior(Tensor([[0.3]]), 10.0).data[0, 0] == 1.0


def test_posterior_two_pair_closed_form():
    p = damsm.batch_posterior(Tensor(np.eye(2)), 10.0).data
    e10 = math.exp(10)
    assert abs(p[0, 0] - e10 / (e10 + 1)) <= 1e-15
    assert abs(p[0, 0] - oracles.posterior_row([1.0, 0.0], 0, 10.0)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31), st.sampled_from([0, 1]))
def test_posterior_normalized(M, seed, axis):
    s = np.random.default_rng(seed).uniform(-1, 1, (M, M))
    p = damsm.batch_posterior(Tensor(s), 10.0, axis=axis).data
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)


# -- full loss ----------------------------------------------------------------

def test_loss_single_pair_is_zero():
    ib, tb = _batch(np.random.default_rng(9), 1, 4, 3, 4)
    out = damsm.damsm_loss(ib, tb)
    for part in (out.w1, out.w2, out.s1, out.s2, out.total):
        assert part.item() == 0.0


def test_loss_empty_batch():
    ib, tb = _batch(np.random.default_rng(9), 0, 4, 3, 4)
    with pytest.raises(ContractError):
        damsm.damsm_loss(ib, tb)


def test_loss_matches_bruteforce():
    rng = np.random.default_rng(10)
    ib, tb = _batch(rng, 3, 4, 3, 5)
    ours = damsm.damsm_loss(ib, tb, 5.0, 5.0, 10.0)
    ref, parts = oracles.damsm_loss(ib.local.data.tolist(), ib.global_.data.tolist(), tb.words.data.tolist(),
                                    tb.sentence.data.tolist(), 5.0, 5.0, 10.0)
    got = [ours.w1.item(), ours.w2.item(), ours.s1.item(), ours.s2.item()]
    np.testing.assert_allclose(got, parts, rtol=1e-6)
    assert ours.total.item() == pytest.approx(ref, rel=1e-6)
    assert ours.total.item() == pytest.approx(sum(got), abs=1e-12)


def test_loss_padding_ignores_pad_columns():
    rng = np.random.default_rng(11)
    ib, tb = _batch(rng, 2, 4, 3, 4)
    tb.mask[1, 2] = False
    base = damsm.damsm_loss(ib, tb).total.item()
    tb.words.data[1, :, 2] = 123.0
    assert damsm.damsm_loss(ib, tb).total.item() == pytest.approx(base, abs=1e-12)


def _aligned_pair():
    """Pair 0: image regions equal the caption's words; pair 1 orthogonal to pair 0."""
    e0 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    e1 = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    words = np.stack([e0, e1]) * 3.0
    local = np.stack([e0, e1]) * 3.0
    sent = np.stack([e0.sum(1), e1.sum(1)])
    return local, sent, words, sent.copy()


def test_loss_constructed_beats_swapped():
    local, glob, words, sent = _aligned_pair()
    mask = np.ones((2, 2), dtype=bool)
    good = damsm.damsm_loss(ImageBatch(Tensor(local), Tensor(glob)), TextBatch(Tensor(words), Tensor(sent), mask))
    bad = damsm.damsm_loss(ImageBatch(Tensor(local[::-1].copy()), Tensor(glob[::-1].copy())),
                           TextBatch(Tensor(words), Tensor(sent), mask))
    assert good.total.item() < bad.total.item()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_swap_never_decreases_loss_on_separable_batches(seed):
    rng = np.random.default_rng(seed)
    M, D, N = 3, 6, 2
    basis = np.linalg.qr(rng.standard_normal((D, D)))[0]
    words = np.stack([basis[:, 2 * i:2 * i + 2] for i in range(M)]) * rng.uniform(1, 3)
    local = words.copy()
    sent = words.sum(axis=2)
    mask = np.ones((M, N), dtype=bool)
    tb = TextBatch(Tensor(words), Tensor(sent), mask)
    good = damsm.damsm_loss(ImageBatch(Tensor(local), Tensor(sent.copy())), tb).total.item()
    perm = [1, 0, 2]
    bad = damsm.damsm_loss(ImageBatch(Tensor(local[perm]), Tensor(sent[perm])), tb).total.item()
    assert bad >= good


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ib, tb = _batch(rng, 4, 3, 3, 4)
    perm = rng.permutation(4)
    base = damsm.damsm_loss(ib, tb)
    ib2 = ImageBatch(Tensor(ib.local.data[perm]), Tensor(ib.global_.data[perm]))
    tb2 = TextBatch(Tensor(tb.words.data[perm]), Tensor(tb.sentence.data[perm]), tb.mask[perm])
    out = damsm.damsm_loss(ib2, tb2)
    assert out.total.item() == pytest.approx(base.total.item(), rel=1e-12)
    p = damsm.batch_posterior(base.word_scores, 10.0).data
    p2 = damsm.batch_posterior(out.word_scores, 10.0).data
    np.testing.assert_allclose(p2, p[np.ix_(perm, perm)], rtol=1e-10)


def test_loss_grad_two_pairs():
    rng = np.random.default_rng(12)
    ib, tb = _batch(rng, 2, 3, 2, 4)
    f = lambda x: damsm.damsm_loss(ImageBatch(x, ib.global_), tb).total  # noqa: E731
    assert grad_check(f, ib.local.data) <= 1e-4


def test_loss_grad_reaches_encoder_params():
    from attnsynth.image_encoder import ImageEncoder
    from attnsynth.text_encoder import TextEncoder
    rng = np.random.default_rng(13)
    text = TextEncoder(6, embed_dim=3, word_dim=4, seed=1)
    image = ImageEncoder(16, word_dim=4, grid_side=4, widths=(2, 2), global_width=2, seed=2)
    imgs = Tensor(rng.uniform(size=(2, 3, 16, 16)))
    caps = [[1, 2, 3], [4, 5]]
    loss = lambda: damsm.damsm_loss(image.encode_batch(imgs), text.encode_batch(caps)).total  # noqa: E731
    params = [text.fwd.w_hh, image.proj_local, image.proj_global, image.convs[1].weight]
    assert T.parameters_grad_check(loss, params, eps=1e-6) <= 1e-4


def test_report_keys():
    ib, tb = _batch(np.random.default_rng(14), 2, 3, 2, 4)
    rep = damsm.damsm_loss(ib, tb).report()
    assert set(rep) == {"loss_w1", "loss_w2", "loss_s1", "loss_s2", "loss_damsm"}
    assert rep["loss_damsm"] == pytest.approx(rep["loss_w1"] + rep["loss_w2"] + rep["loss_s1"] + rep["loss_s2"])
