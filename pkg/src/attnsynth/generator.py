"""Multi-stage attentional generator.

Stage 0 maps noise plus the augmented sentence condition to a coarse feature
grid. Each later stage lets every sub-region of the previous grid attend over
the words, fuses the resulting word-context features with the grid, and
doubles the resolution. Every stage has its own RGB head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module, pixel_norm, uniform_param
from .tensor import ContractError, Tensor


@dataclass
class AttentionResult:
    """Word-context features (D-hat x N, or batched) and weights beta (N x T), rows summing to 1."""

    context: Tensor
    weights: Tensor


@dataclass
class GeneratorOutput:
    images: list  # per stage, (B, 3, S_i, S_i) in [0, 1]
    attentions: list  # stages 1..m-1
    mu: Tensor
    logvar: Tensor
    hidden: list


def word_attention(e: Tensor, h: Tensor, U: Tensor, mask: np.ndarray | None = None) -> AttentionResult:
    """Attend from every image sub-region (column of ``h``) over the projected words ``U e``.

    e: (D, T) or (B, D, T); h: (D-hat, N) or (B, D-hat, N); mask: (B, T) real-word flags.
    """
    if U.shape[-1] != e.shape[-2] or U.shape[0] != h.shape[-2]:
        raise T.ShapeError(f"attention shapes inconsistent: U {U.shape}, e {e.shape}, h {h.shape}")
    e_proj = T.matmul(U, e)  # (.., D-hat, T)
    s = T.matmul(T.swapaxes(h, -1, -2), e_proj)  # (.., N, T)
    m = None if mask is None else mask[:, None, :]
    beta = T.softmax(s, axis=-1, mask=m)
    context = T.matmul(e_proj, T.swapaxes(beta, -1, -2))  # (.., D-hat, N)
    return AttentionResult(context, beta)


class ConditioningAugmentation(Module):
    """Reparameterized Gaussian around the sentence vector: mu + exp(logvar / 2) * eps."""

    def __init__(self, rng, word_dim: int, c_dim: int, zero_logvar: bool = False):
        super().__init__()
        self.c_dim = c_dim
        self.mu = Linear(rng, word_dim, c_dim)
        self.logvar = Linear(rng, word_dim, c_dim)
        if zero_logvar:
            self.logvar.weight.data[:] = 0.0

    def __call__(self, sentence: Tensor, eps):
        mu = self.mu(sentence)
        logvar = self.logvar(sentence)
        c = mu + T.exp(logvar * 0.5) * T.as_tensor(eps)
        return c, mu, logvar


def conditioning_augmentation(sentence: Tensor, eps, params: ConditioningAugmentation) -> Tensor:
    return params(sentence, eps)[0]


class UpBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, 3, padding=1)

    def __call__(self, x):
        return T.leaky_relu(pixel_norm(self.conv(T.upsample_nearest(x, 2))), 0.2)


class AttnStage(Module):
    """Attention + fusion + residual + 2x upsample for stages i >= 1."""

    def __init__(self, rng, word_dim: int, hidden: int):
        super().__init__()
        self.U = uniform_param(rng, (hidden, word_dim), word_dim)
        self.fuse = Conv2d(rng, 2 * hidden, hidden, 1)
        self.res_a = Conv2d(rng, hidden, hidden, 3, padding=1)
        self.res_b = Conv2d(rng, hidden, hidden, 3, padding=1)
        self.up = UpBlock(rng, hidden, hidden)

    def __call__(self, h: Tensor, words: Tensor, mask):
        B, C, H, W = h.shape
        att = word_attention(words, T.reshape(h, (B, C, H * W)), self.U, mask)
        ctx = T.reshape(att.context, (B, C, H, W))
        x = T.leaky_relu(self.fuse(T.concat([h, ctx], axis=1)), 0.2)
        r = self.res_b(T.leaky_relu(self.res_a(x), 0.2))
        x = T.leaky_relu(x + r, 0.2)
        return self.up(x), att


class ImageHead(Module):
    def __init__(self, rng, hidden: int):
        super().__init__()
        self.conv = Conv2d(rng, hidden, 3, 3, padding=1)

    def __call__(self, h):
        return (T.tanh(self.conv(h)) + 1.0) * 0.5


class Generator(Module):
    def __init__(self, stages: int = 2, image_side: int = 32, word_dim: int = 32, hidden: int = 32,
                 z_dim: int = 16, c_dim: int = 16, zero_logvar: bool = False, seed: int = 0):
        super().__init__()
        if stages < 1:
            raise ContractError("need at least one stage")
        base = image_side >> (stages - 1)
        if base < 4 or base << (stages - 1) != image_side or base & (base - 1):
            raise ContractError(f"image_side {image_side} incompatible with {stages} stages")
        rng = np.random.default_rng(seed)
        self.stages = stages
        self.hidden = hidden
        self.z_dim = z_dim
        self.base_side = base
        self.ca = ConditioningAugmentation(rng, word_dim, c_dim, zero_logvar)
        self.fc0 = Linear(rng, z_dim + c_dim, hidden * 16)
        self.up0 = [UpBlock(rng, hidden, hidden) for _ in range(int(np.log2(base // 4)))]
        self.attn_stages = [AttnStage(rng, word_dim, hidden) for _ in range(stages - 1)]
        self.heads = [ImageHead(rng, hidden) for _ in range(stages)]

    @property
    def sides(self) -> list[int]:
        return [self.base_side << i for i in range(self.stages)]

    def initial_stage(self, z: Tensor, c_aug: Tensor) -> Tensor:
        B = z.shape[0]
        x = self.fc0(T.concat([T.as_tensor(z), c_aug], axis=1))
        h = T.leaky_relu(pixel_norm(T.reshape(x, (B, self.hidden, 4, 4))), 0.2)
        for blk in self.up0:
            h = blk(h)
        return h

    def stage_forward(self, h_prev: Tensor, words: Tensor, mask, i: int):
        if not 1 <= i < self.stages:
            raise ContractError(f"stage index {i} outside [1, {self.stages - 1}]")
        return self.attn_stages[i - 1](h_prev, words, mask)

    def generate_image(self, h: Tensor, i: int) -> Tensor:
        if not 0 <= i < self.stages:
            raise ContractError(f"stage index {i} outside [0, {self.stages - 1}]")
        return self.heads[i](h)

    def __call__(self, z, text, eps) -> GeneratorOutput:
        """Run all stages. ``text`` is a TextBatch; ``z`` (B, z_dim); ``eps`` (B, c_dim)."""
        c, mu, logvar = self.ca(text.sentence, eps)
        h = self.initial_stage(T.as_tensor(z), c)
        hidden = [h]
        images = [self.generate_image(h, 0)]
        attns = []
        for i in range(1, self.stages):
            h, att = self.stage_forward(h, text.words, text.mask, i)
            hidden.append(h)
            attns.append(att)
            images.append(self.generate_image(h, i))
        return GeneratorOutput(images, attns, mu, logvar, hidden)


def sample_noise(rng: np.random.Generator, batch: int, z_dim: int, c_dim: int):
    return rng.standard_normal((batch, z_dim)), rng.standard_normal((batch, c_dim))


def generate_all(z, text, params: Generator, eps=None):
    """Images for every stage plus the m-1 attention results."""
    if eps is None:
        eps = np.zeros((T.as_tensor(z).shape[0], params.ca.c_dim))
    out = params(z, text, eps)
    return out.images, out.attentions


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), batch mean."""
    kl = (mu * mu + T.exp(logvar) - logvar - 1.0) * 0.5
    return T.mean(T.tsum(kl, axis=1))
