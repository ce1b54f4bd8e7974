"""Attention-driven image-text matching: word/region scores and the four-part matching loss.

Shapes follow the column convention: word features ``e`` are (D, T), region
features ``v`` are (D, N). Batched helpers prepend batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

COS_EPS = 1e-8


@dataclass
class MatchScore:
    per_word: Tensor  # (..., T) cosine relevances
    score: Tensor  # (...) aggregate
    zero_norm: bool = False


@dataclass
class DamsmLoss:
    total: Tensor
    w1: Tensor
    w2: Tensor
    s1: Tensor
    s2: Tensor
    word_scores: Tensor  # (M, M): [image i, caption j]
    sent_scores: Tensor
    zero_norm: bool = False

    def report(self) -> dict:
        return {
            "loss_w1": self.w1.item(),
            "loss_w2": self.w2.item(),
            "loss_s1": self.s1.item(),
            "loss_s2": self.s2.item(),
            "loss_damsm": self.total.item(),
        }


def _norm(x: Tensor, axis: int) -> Tensor:
    return T.sqrt(T.tsum(x * x, axis=axis) + 1e-300)


def cosine(a: Tensor, b: Tensor, axis: int = -1):
    """Cosine along ``axis`` with the denominator guarded by COS_EPS."""
    na, nb = _norm(a, axis), _norm(b, axis)
    zero = bool((na.data < COS_EPS).any() or (nb.data < COS_EPS).any())
    return T.tsum(a * b, axis=axis) / (na * nb + COS_EPS), zero


def similarity_matrix(e: Tensor, v: Tensor) -> Tensor:
    """s[i, j] = e_i . v_j for word columns of ``e`` and region columns of ``v``."""
    if e.shape[-2] != v.shape[-2]:
        raise ShapeError(f"feature dims differ: words {e.shape}, regions {v.shape}")
    return T.matmul(T.swapaxes(e, -1, -2), v)


def normalize_over_words(s: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the word axis (-2) for every region; pads excluded via ``mask``."""
    return T.softmax(s, axis=-2, mask=mask)


def region_context(s_bar: Tensor, v: Tensor, gamma1: float):
    """Per-word attention over regions and the resulting region-context vectors.

    Returns ``(c, alpha)`` with ``alpha`` (T, N) rows summing to 1 and ``c`` (D, T).
    """
    if gamma1 <= 0:
        raise ContractError("gamma1 must be positive")
    alpha = T.softmax(s_bar * gamma1, axis=-1)
    c = T.matmul(v, T.swapaxes(alpha, -1, -2))
    return c, alpha


def match_score(e: Tensor, c: Tensor, gamma2: float, mask: np.ndarray | None = None) -> MatchScore:
    """Per-word cosine relevances and their log-sum-exp aggregate (1/gamma2) log sum exp(gamma2 r_i).

    Sums over all T words. ``mask`` (..., T) drops padded words from the sum.
    """
    if gamma2 <= 0:
        raise ContractError("gamma2 must be positive")
    r, zero = cosine(c, e, axis=-2)
    agg = T.logsumexp(r * gamma2, axis=-1, mask=mask) * (1.0 / gamma2)
    return MatchScore(r, agg, zero)


def sentence_score(v_global: Tensor, e_global: Tensor) -> Tensor:
    return cosine(v_global, e_global, axis=-1)[0]


def batch_posterior(scores: Tensor, gamma3: float, axis: int = 1) -> Tensor:
    """Softmax of gamma3 * scores; axis=1 gives P(D_j | Q_i) per image row,
    axis=0 gives P(Q_i | D_j) per caption column."""
    if gamma3 <= 0:
        raise ContractError("gamma3 must be positive")
    return T.softmax(T.as_tensor(scores) * gamma3, axis=axis)


def word_score_matrix(words: Tensor, mask: np.ndarray, local: Tensor, gamma1: float, gamma2: float):
    """All-pairs word-level scores.

    words (Mc, D, T), mask (Mc, T), local (Mi, D, N) -> scores (Mi, Mc) with
    scores[i, j] = R(Q_i, D_j), plus the zero-norm flag.
    """
    Mc, D, Tm = words.shape
    Mi = local.shape[0]
    eT = T.reshape(T.swapaxes(words, 1, 2), (Mc, 1, Tm, D))
    v = T.reshape(local, (1, Mi) + local.shape[1:])
    s = T.matmul(eT, v)  # (Mc, Mi, T, N)
    s_bar = normalize_over_words(s, mask=mask[:, None, :, None])
    c, _ = region_context(s_bar, v, gamma1)  # (Mc, Mi, D, T)
    e4 = T.reshape(words, (Mc, 1, D, Tm))
    m = match_score(e4, c, gamma2, mask=mask[:, None, :])
    return T.transpose(m.score), m.zero_norm


def sent_score_matrix(v_global: Tensor, e_global: Tensor) -> Tensor:
    """scores[i, j] = cos(v_global_i, e_global_j)."""
    Mi, D = v_global.shape
    Mc = e_global.shape[0]
    a = T.reshape(v_global, (Mi, 1, D))
    b = T.reshape(e_global, (1, Mc, D))
    return cosine(a, b, axis=-1)[0]


def _nll_pair(scores: Tensor, gamma3: float):
    M = scores.shape[0]
    diag = (np.arange(M), np.arange(M))
    l1 = -T.tsum(T.log_softmax(scores * gamma3, axis=1)[diag])
    l2 = -T.tsum(T.log_softmax(scores * gamma3, axis=0)[diag])
    return l1, l2


def damsm_loss(image_batch, text_batch, gamma1: float = 5.0, gamma2: float = 5.0, gamma3: float = 10.0) -> DamsmLoss:
    """Sum of the word-level and sentence-level matching losses over a batch of M aligned pairs.

    ``image_batch`` is an :class:`ImageBatch`, ``text_batch`` a :class:`TextBatch`;
    pair i is (image i, caption i). Each of the four terms is a sum of negative
    log posteriors over the batch.
    """
    M = image_batch.local.shape[0]
    if M == 0:
        raise ContractError("damsm_loss needs at least one pair")
    if text_batch.words.shape[0] != M:
        raise ShapeError(f"batch size mismatch: {M} images vs {text_batch.words.shape[0]} captions")
    ws, zero_w = word_score_matrix(text_batch.words, text_batch.mask, image_batch.local, gamma1, gamma2)
    ss = sent_score_matrix(image_batch.global_, text_batch.sentence)
    w1, w2 = _nll_pair(ws, gamma3)
    s1, s2 = _nll_pair(ss, gamma3)
    total = w1 + w2 + s1 + s2
    return DamsmLoss(total, w1, w2, s1, s2, ws, ss, zero_w)
