import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnsynth import tensor as T
from attnsynth.generator import (ConditioningAugmentation, Generator, conditioning_augmentation, generate_all,
                                 kl_divergence, sample_noise, word_attention)
from attnsynth.tensor import ContractError, Tensor
from attnsynth.text_encoder import TextBatch

import oracles


def _text(rng, B=2, D=6, Tw=4):
    return TextBatch(Tensor(rng.standard_normal((B, D, Tw))), Tensor(rng.standard_normal((B, D))),
                     np.ones((B, Tw), dtype=bool))


def _gen(stages=2, side=16, **kw):
    return Generator(stages, side, word_dim=6, hidden=8, z_dim=4, c_dim=3, seed=kw.pop("seed", 0), **kw)


# -- conditioning augmentation -------------------------------------------------

def test_ca_zero_eps_is_mean():
    ca = ConditioningAugmentation(np.random.default_rng(0), 6, 3)
    s = Tensor(np.random.default_rng(1).standard_normal((2, 6)))
    c, mu, _ = ca(s, np.zeros((2, 3)))
    np.testing.assert_array_equal(c.data, mu.data)


def test_ca_stochastic():
    ca = ConditioningAugmentation(np.random.default_rng(0), 6, 3)
    s = Tensor(np.ones((1, 6)))
    a = conditioning_augmentation(s, np.ones((1, 3)), ca)
    b = conditioning_augmentation(s, -np.ones((1, 3)), ca)
    assert not np.allclose(a.data, b.data)


def test_ca_zero_logvar_adds_eps_exactly():
    ca = ConditioningAugmentation(np.random.default_rng(0), 6, 3, zero_logvar=True)
    ca.logvar.bias.data[:] = 0.0
    s = Tensor(np.random.default_rng(2).standard_normal((2, 6)))
    eps = np.random.default_rng(3).standard_normal((2, 3))
    c, mu, _ = ca(s, eps)
    np.testing.assert_allclose(c.data, mu.data + eps, rtol=0, atol=1e-15)


def test_kl_zero_at_standard_normal():
    assert kl_divergence(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3)))).item() == 0.0


# -- word attention -----------------------------------------------------------

def test_attention_single_word():
    rng = np.random.default_rng(4)
    e, h, U = rng.standard_normal((5, 1)), rng.standard_normal((3, 6)), rng.standard_normal((3, 5))
    out = word_attention(Tensor(e), Tensor(h), Tensor(U))
    assert np.all(out.weights.data == 1.0)
    np.testing.assert_allclose(out.context.data, np.repeat(U @ e, 6, axis=1), rtol=1e-13)


def test_attention_hand_example():
    e = Tensor(np.eye(2))
    U = Tensor(np.eye(2))
    h = Tensor(np.array([[10.0], [0.0]]))
    out = word_attention(e, h, U)
    b = math.exp(10) / (math.exp(10) + 1)
    np.testing.assert_allclose(out.weights.data[0], [b, 1 - b], atol=1e-15)
    np.testing.assert_allclose(out.context.data[:, 0], [b, 1 - b], atol=1e-15)
    assert abs(b - 0.9999546) < 1e-7
    ctx, beta = oracles.word_attention(np.eye(2).tolist(), [[10.0], [0.0]], np.eye(2).tolist())
    np.testing.assert_allclose(out.weights.data, beta, atol=1e-9)
    np.testing.assert_allclose(out.context.data.T, ctx, atol=1e-9)


def test_attention_matches_bruteforce_random():
    rng = np.random.default_rng(5)
    e, h, U = rng.standard_normal((4, 3)), rng.standard_normal((5, 6)), rng.standard_normal((5, 4))
    out = word_attention(Tensor(e), Tensor(h), Tensor(U))
    ctx, beta = oracles.word_attention(e.tolist(), h.tolist(), U.tolist())
    np.testing.assert_allclose(out.weights.data, beta, atol=1e-12)
    np.testing.assert_allclose(out.context.data.T, ctx, atol=1e-12)


def test_attention_shift_invariance():
    """Adding one vector w to every word column shifts row j of the scores by h_j . (U w)."""
    rng = np.random.default_rng(6)
    e, U, h = rng.standard_normal((4, 3)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    w = rng.standard_normal((4, 1))
    b1 = word_attention(Tensor(e), Tensor(h), Tensor(U)).weights.data
    b2 = word_attention(Tensor(e + w), Tensor(h), Tensor(U)).weights.data
    np.testing.assert_allclose(b1, b2, atol=1e-14)


def test_attention_argmax_follows_query():
    """h_j = 10 e'_k with unit-norm projected words: word k has the largest score, so it wins."""
    rng = np.random.default_rng(7)
    ep = rng.standard_normal((6, 5))
    ep /= np.linalg.norm(ep, axis=0)
    for k in range(5):
        beta = word_attention(Tensor(ep), Tensor(ep[:, [k]] * 10.0), Tensor(np.eye(6))).weights.data
        assert int(np.argmax(beta[0])) == k


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_attention_rows_stochastic(Tw, N, seed):
    rng = np.random.default_rng(seed)
    out = word_attention(Tensor(rng.standard_normal((3, Tw))), Tensor(rng.standard_normal((4, N)) * 3),
                         Tensor(rng.standard_normal((4, 3))))
    np.testing.assert_allclose(out.weights.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((out.weights.data >= 0) & (out.weights.data <= 1))


def test_attention_mask_excludes_padding():
    rng = np.random.default_rng(8)
    e = Tensor(rng.standard_normal((2, 3, 4)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    out = word_attention(e, Tensor(rng.standard_normal((2, 5, 6))), Tensor(rng.standard_normal((5, 3))), mask)
    assert np.all(out.weights.data[1, :, 2:] == 0)


# -- stages -------------------------------------------------------------------

def test_stage_resolution_doubles():
    gen = _gen(stages=3, side=32)
    rng = np.random.default_rng(9)
    z, eps = sample_noise(rng, 2, 4, 3)
    out = gen(z, _text(rng), eps)
    assert gen.sides == [8, 16, 32]
    assert [im.shape[-1] for im in out.images] == [8, 16, 32]
    assert [h.shape[-1] for h in out.hidden] == [8, 16, 32]
    for a, b in zip(out.hidden, out.hidden[1:]):
        assert b.shape[-1] * b.shape[-2] == 4 * a.shape[-1] * a.shape[-2]


def test_generate_all_counts():
    rng = np.random.default_rng(10)
    for m in (2, 3):
        imgs, atts = generate_all(rng.standard_normal((2, 4)), _text(rng), _gen(stages=m, side=32))
        assert len(imgs) == m and len(atts) == m - 1


def test_images_in_unit_interval():
    rng = np.random.default_rng(11)
    imgs, _ = generate_all(rng.standard_normal((2, 4)) * 10, _text(rng), _gen())
    for im in imgs:
        assert im.data.min() >= 0 and im.data.max() <= 1 and im.shape[1] == 3


def test_stage_index_errors():
    gen = _gen()
    h = Tensor(np.zeros((1, 8, 8, 8)))
    with pytest.raises(ContractError):
        gen.stage_forward(h, Tensor(np.zeros((1, 6, 2))), None, 0)
    with pytest.raises(ContractError):
        gen.stage_forward(h, Tensor(np.zeros((1, 6, 2))), None, 2)
    with pytest.raises(ContractError):
        gen.generate_image(h, 5)


def test_stage_output_depends_on_words():
    gen = _gen()
    rng = np.random.default_rng(12)
    h = Tensor(rng.standard_normal((1, 8, 8, 8)))
    a, _ = gen.stage_forward(h, Tensor(rng.standard_normal((1, 6, 3))), None, 1)
    b, _ = gen.stage_forward(h, Tensor(rng.standard_normal((1, 6, 3))), None, 1)
    assert not np.allclose(a.data, b.data)


def test_zero_U_removes_word_dependence():
    gen = _gen()
    gen.attn_stages[0].U.data[:] = 0.0
    rng = np.random.default_rng(13)
    h = Tensor(rng.standard_normal((1, 8, 8, 8)))
    a, _ = gen.stage_forward(h, Tensor(rng.standard_normal((1, 6, 3))), None, 1)
    b, _ = gen.stage_forward(h, Tensor(rng.standard_normal((1, 6, 5))), None, 1)
    np.testing.assert_array_equal(a.data, b.data)


def test_initial_stage_noise_and_determinism():
    gen = _gen()
    c = Tensor(np.ones((1, 3)))
    z1, z2 = np.zeros((1, 4)), np.ones((1, 4))
    assert gen.initial_stage(Tensor(z1), c).data.tobytes() == gen.initial_stage(Tensor(z1), c).data.tobytes()
    assert not np.allclose(gen.initial_stage(Tensor(z1), c).data, gen.initial_stage(Tensor(z2), c).data)


def test_generator_deterministic_given_seed():
    rng = np.random.default_rng(14)
    z, text = rng.standard_normal((2, 4)), _text(rng)
    a, _ = generate_all(z, text, _gen(seed=3))
    b, _ = generate_all(z, text, _gen(seed=3))
    assert a[-1].data.tobytes() == b[-1].data.tobytes()


def test_gradient_reaches_U():
    gen = _gen()
    rng = np.random.default_rng(15)
    out = gen(rng.standard_normal((2, 4)), _text(rng), rng.standard_normal((2, 3)))
    T.tsum(out.images[-1] * rng.standard_normal(out.images[-1].shape)).backward()
    assert np.abs(gen.attn_stages[0].U.grad).sum() > 0


def test_bad_side_for_stages():
    with pytest.raises(ContractError):
        Generator(3, 12)
