"""Bidirectional LSTM text encoder: per-word features and a sentence vector."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, uniform_param
from .tensor import ContractError, Tensor

PAD = "<pad>"


class VocabError(KeyError):
    pass


class Vocabulary:
    """Token <-> index map with ``<pad>`` fixed at index 0."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD:
            raise ValueError("vocabulary must start with <pad>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[w] for w in words]
        except KeyError as exc:
            raise VocabError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class TextFeatures:
    """Word matrix ``e`` (D x T) and sentence vector (D,) for one caption."""

    e: Tensor
    sentence: Tensor

    @property
    def T(self) -> int:
        return self.e.shape[1]

    @property
    def D(self) -> int:
        return self.e.shape[0]


@dataclass
class TextBatch:
    """Padded batch: words (B, D, Tmax), sentence (B, D), mask (B, Tmax) True on real tokens."""

    words: Tensor
    sentence: Tensor
    mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


class LSTMCell(Module):
    def __init__(self, rng, n_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.w_ih = uniform_param(rng, (n_in, 4 * hidden), hidden)
        self.w_hh = uniform_param(rng, (hidden, 4 * hidden), hidden)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget gate
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        H = self.hidden
        gates = T.matmul(x, self.w_ih) + T.matmul(h, self.w_hh) + self.bias
        i = T.sigmoid(gates[:, :H])
        f = T.sigmoid(gates[:, H : 2 * H])
        g = T.tanh(gates[:, 2 * H : 3 * H])
        o = T.sigmoid(gates[:, 3 * H :])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new


class TextEncoder(Module):
    def __init__(self, vocab_size: int, embed_dim: int = 16, word_dim: int = 32, max_len: int = 16, seed: int = 0):
        super().__init__()
        if vocab_size <= 0 or embed_dim <= 0 or word_dim <= 0 or max_len <= 0:
            raise ContractError("text encoder dims must be positive")
        if word_dim % 2:
            raise ContractError(f"word_dim must be even (two directions), got {word_dim}")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.max_len = max_len
        hidden = word_dim // 2
        self.embed = uniform_param(rng, (vocab_size, embed_dim), embed_dim)
        self.fwd = LSTMCell(rng, embed_dim, hidden)
        self.bwd = LSTMCell(rng, embed_dim, hidden)

    @property
    def word_dim(self) -> int:
        return 2 * self.fwd.hidden

    def _check(self, ids: Sequence[int]) -> None:
        if len(ids) == 0:
            raise ContractError("cannot encode an empty token sequence")
        if len(ids) > self.max_len:
            raise ContractError(f"sequence length {len(ids)} exceeds max_len {self.max_len}")
        for i in ids:
            if not 0 < int(i) < self.vocab_size:
                raise VocabError(f"token index {i} outside vocabulary (size {self.vocab_size})")

    def encode_batch(self, batch: Sequence[Sequence[int]]) -> TextBatch:
        """Encode captions of possibly unequal length; padding never touches real outputs."""
        for ids in batch:
            self._check(ids)
        B = len(batch)
        Tm = max(len(ids) for ids in batch)
        idx = np.zeros((B, Tm), dtype=np.int64)
        mask = np.zeros((B, Tm), dtype=bool)
        for b, ids in enumerate(batch):
            idx[b, : len(ids)] = ids
            mask[b, : len(ids)] = True
        x = T.embedding(self.embed, idx)  # (B, Tm, E)
        H = self.fwd.hidden

        def run(cell, steps):
            h = Tensor(np.zeros((B, H)))
            c = Tensor(np.zeros((B, H)))
            outs = {}
            for t in steps:
                hn, cn = cell(x[:, t, :], h, c)
                m = mask[:, t : t + 1].astype(np.float64)
                # padded steps carry the previous state unchanged
                h = hn * m + h * (1.0 - m)
                c = cn * m + c * (1.0 - m)
                outs[t] = h
            return outs, h

        f_out, f_last = run(self.fwd, range(Tm))
        b_out, b_last = run(self.bwd, range(Tm - 1, -1, -1))
        per_t = [T.concat([f_out[t], b_out[t]], axis=1) for t in range(Tm)]
        words = T.stack(per_t, axis=2)  # (B, D, Tm)
        sentence = T.concat([f_last, b_last], axis=1)
        return TextBatch(words, sentence, mask)

    def __call__(self, ids: Sequence[int]) -> TextFeatures:
        out = self.encode_batch([ids])
        return TextFeatures(out.words[0], out.sentence[0])


def init_text_encoder(seed: int, vocab_size: int, embed_dim: int = 16, word_dim: int = 32, max_len: int = 16) -> TextEncoder:
    return TextEncoder(vocab_size, embed_dim, word_dim, max_len, seed=seed)


def encode_text(tokens: Sequence[int], params: TextEncoder) -> TextFeatures:
    return params(tokens)
