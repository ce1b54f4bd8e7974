"""Finite-difference suite over the four trainable objectives on small random instances."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .damsm import damsm_loss
from .gan_losses import Discriminators, discriminator_loss, generator_adv_loss
from .generator import word_attention
from .image_encoder import ImageBatch
from .tensor import Tensor, grad_check, parameters_grad_check
from .text_encoder import TextBatch

TOLERANCE = 1e-4
SMOOTH_EPS = 1e-6
# conv nets are roundoff-limited at small steps; kinks are kept out of reach instead
PIECEWISE_EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _word_attention(rng) -> float:
    D, Dh, Tw, N = 3, 4, 3, 4
    e = rng.standard_normal((D, Tw))
    h = rng.standard_normal((Dh, N))
    U = rng.standard_normal((Dh, D)) * 0.5
    w = rng.standard_normal((Dh, N))  # random readout keeps the loss generic

    def loss(e_, h_, U_):
        return T.tsum(word_attention(e_, h_, U_).context * w)

    return max(
        grad_check(lambda x: loss(x, Tensor(h), Tensor(U)), e, SMOOTH_EPS),
        grad_check(lambda x: loss(Tensor(e), x, Tensor(U)), h, SMOOTH_EPS),
        grad_check(lambda x: loss(Tensor(e), Tensor(h), x), U, SMOOTH_EPS),
    )


def _damsm(rng) -> float:
    M, D, Tw, N = 3, 4, 3, 4
    local = rng.standard_normal((M, D, N))
    glob = rng.standard_normal((M, D))
    words = rng.standard_normal((M, D, Tw))
    sent = rng.standard_normal((M, D))
    mask = np.ones((M, Tw), dtype=bool)
    mask[0, -1] = False  # one padded caption

    def loss(lo, gl, wo, se):
        return damsm_loss(ImageBatch(lo, gl), TextBatch(wo, se, mask)).total

    t = Tensor
    return max(
        grad_check(lambda x: loss(x, t(glob), t(words), t(sent)), local, SMOOTH_EPS),
        grad_check(lambda x: loss(t(local), x, t(words), t(sent)), glob, SMOOTH_EPS),
        grad_check(lambda x: loss(t(local), t(glob), x, t(sent)), words, SMOOTH_EPS),
        grad_check(lambda x: loss(t(local), t(glob), t(words), x), sent, SMOOTH_EPS),
    )


KINK_MARGIN = 3e-3  # pre-activations must clear zero by this much so +-PIECEWISE_EPS never crosses a kink


def _kink_margin(disc: Discriminators, images, sent) -> float:
    """Smallest |pre-activation| feeding a leaky ReLU in the stage-0 discriminator."""
    d = disc[0]
    with T.no_grad():
        margins = []
        for img in images:
            h = T.as_tensor(img) * 2.0 - 1.0
            for conv in d.convs:
                pre = conv(h)
                margins.append(np.abs(pre.data).min())
                h = T.leaky_relu(pre, 0.2)
            B, C, H, W = h.shape
            s = np.broadcast_to(sent.data.reshape(B, -1, 1, 1), (B, sent.shape[-1], H, W))
            margins.append(np.abs(d.cond_joint(T.concat([h, Tensor(s)], axis=1)).data).min())
    return float(min(margins))


def _generic_disc_instance(rng, n_images: int, low: float = 0.0, high: float = 1.0, tries: int = 200):
    for _ in range(tries):
        disc = Discriminators([8], word_dim=3, width=2, seed=int(rng.integers(1 << 30)))
        images = [rng.uniform(low, high, (2, 3, 8, 8)) for _ in range(n_images)]
        sent = Tensor(rng.standard_normal((2, 3)))
        sents = [sent, Tensor(np.roll(sent.data, 1, axis=0))]
        if all(_kink_margin(disc, images, s) > KINK_MARGIN for s in sents):
            return disc, images, sent
    raise RuntimeError("could not draw a kink-free discriminator instance")


def _generator_adv(rng) -> float:
    disc, (fake,), sent = _generic_disc_instance(rng, 1, 0.2, 0.8)
    return grad_check(lambda x: generator_adv_loss([x], sent, disc)[0], fake, PIECEWISE_EPS)


def _discriminator(rng) -> float:
    disc, (real, fake), sent = _generic_disc_instance(rng, 2)
    real, fake = Tensor(real), Tensor(fake)
    return parameters_grad_check(lambda: discriminator_loss(real, fake, sent, disc, 0, mismatch_real=True)[0],
                                 disc.parameters(), PIECEWISE_EPS)


CHECKS = {
    "word_attention": _word_attention,
    "damsm_loss": _damsm,
    "generator_adv_loss": _generator_adv,
    "discriminator_loss": _discriminator,
}


def run_suite(seed: int = 0) -> list[CheckResult]:
    out = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        t0 = time.perf_counter()
        err = fn(np.random.default_rng([seed, i]))
        out.append(CheckResult(name, err, time.perf_counter() - t0))
    return out
