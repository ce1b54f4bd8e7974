"""Per-stage discriminators and the adversarial objectives."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ContractError, Tensor

PROB_CLAMP = 1e-7


class StageDiscriminator(Module):
    """Strided conv stack down to 4x4, then an unconditional and a sentence-conditioned logit head."""

    def __init__(self, rng, side: int, word_dim: int = 32, width: int = 16):
        super().__init__()
        n_down = int(np.log2(side // 4))
        if n_down < 1 or 4 << n_down != side:
            raise ContractError(f"discriminator side must be 4 * 2^k, got {side}")
        self.side = side
        c, convs = 3, []
        for k in range(n_down):
            w = width << k
            convs.append(Conv2d(rng, c, w, 4, stride=2, padding=1))
            c = w
        self.convs = convs
        self.uncond = Conv2d(rng, c, 1, 4)
        self.cond_joint = Conv2d(rng, c + word_dim, c, 3, padding=1)
        self.cond = Conv2d(rng, c, 1, 4)

    def features(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[-1] != self.side or img.shape[-2] != self.side:
            raise ContractError(f"discriminator for {self.side}px got image shape {img.shape}")
        h = img * 2.0 - 1.0
        for conv in self.convs:
            h = T.leaky_relu(conv(h), 0.2)
        return h

    def logits(self, img: Tensor, sentence: Tensor):
        h = self.features(img)
        B, C, H, W = h.shape
        s = T.broadcast_to(T.reshape(sentence, (B, -1, 1, 1)), (B, sentence.shape[-1], H, W))
        j = T.leaky_relu(self.cond_joint(T.concat([h, s], axis=1)), 0.2)
        return T.reshape(self.uncond(h), (B,)), T.reshape(self.cond(j), (B,))

    def __call__(self, img: Tensor, sentence: Tensor):
        lu, lc = self.logits(img, sentence)
        return T.sigmoid(lu), T.sigmoid(lc)


class Discriminators(Module):
    """One structurally independent discriminator per stage."""

    def __init__(self, sides, word_dim: int = 32, width: int = 16, seed: int = 0):
        super().__init__()
        base = [int(x) for x in np.atleast_1d(seed)]
        self.nets = [StageDiscriminator(np.random.default_rng(base + [i]), s, word_dim, width)
                     for i, s in enumerate(sides)]

    def __getitem__(self, i) -> StageDiscriminator:
        return self.nets[i]

    def __len__(self) -> int:
        return len(self.nets)


def discriminate(img: Tensor, sentence: Tensor, params: Discriminators, stage: int):
    """(p_uncond, p_cond) for a batch of stage-``stage`` images."""
    if img.ndim == 3:
        img = T.reshape(img, (1,) + img.shape)
        sentence = T.reshape(sentence, (1, -1))
    return params[stage](img, sentence)


def _log_clamped(p: Tensor) -> Tensor:
    return T.log(T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def generator_stage_loss(p_uncond: Tensor, p_cond: Tensor) -> Tensor:
    """-1/2 E[log D(x_fake)] - 1/2 E[log D(x_fake, sentence)]."""
    return T.mean(_log_clamped(p_uncond)) * -0.5 + T.mean(_log_clamped(p_cond)) * -0.5


def discriminator_stage_loss(real_u: Tensor, real_c: Tensor, fake_u: Tensor, fake_c: Tensor,
                             wrong_c: Tensor | None = None):
    """Cross-entropy over real/fake for both heads. Returns (total, uncond part, cond part).

    ``wrong_c`` (real image, mismatched caption) is an optional extra negative;
    when given it shares the conditional-negative weight with the fake term.
    """
    uncond = T.mean(_log_clamped(real_u)) * -0.5 + T.mean(_log_clamped(1.0 - fake_u)) * -0.5
    neg = T.mean(_log_clamped(1.0 - fake_c))
    if wrong_c is not None:
        neg = (neg + T.mean(_log_clamped(1.0 - wrong_c))) * 0.5
    cond = T.mean(_log_clamped(real_c)) * -0.5 + neg * -0.5
    return uncond + cond, uncond, cond


def generator_adv_loss(fakes, sentence: Tensor, d_params: Discriminators) -> list:
    """Per-stage generator losses, one per fake image batch."""
    if len(fakes) != len(d_params):
        raise ContractError(f"{len(fakes)} fakes for {len(d_params)} discriminators")
    return [generator_stage_loss(*d_params[i](x, sentence)) for i, x in enumerate(fakes)]


def discriminator_loss(reals: Tensor, fakes: Tensor, sentence: Tensor, d_params: Discriminators, stage: int,
                       mismatch_real: bool = False):
    """Stage discriminator loss; fakes are detached from the generator graph here."""
    d = d_params[stage]
    fakes = fakes.detach() if isinstance(fakes, Tensor) else T.as_tensor(fakes)
    ru, rc = d(reals, sentence)
    fu, fc = d(fakes, sentence)
    wc = None
    if mismatch_real:
        wrong = T.Tensor(np.roll(sentence.data, 1, axis=0))
        wc = d(reals, wrong)[1]
    return discriminator_stage_loss(ru, rc, fu, fc, wc)


@dataclass
class LossReport:
    stage_losses: list
    loss_g: float
    damsm_weighted: float
    total: Tensor
    lambda_damsm: float
    kl: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {f"loss_g{i}": v for i, v in enumerate(self.stage_losses)}
        d.update(loss_g=self.loss_g, damsm_weighted=self.damsm_weighted, total=self.total.item(),
                 lambda_damsm=self.lambda_damsm)
        if self.kl:
            d["kl"] = self.kl
        d.update(self.extra)
        return d


def total_objective(adv_losses, damsm_value, lam: float, kl: Tensor | None = None, kl_weight: float = 0.0) -> LossReport:
    """L = sum_i L_Gi + lambda * L_DAMSM (+ optional weighted CA KL term).

    ``damsm_value`` must come from the last stage's images only.
    """
    loss_g = adv_losses[0]
    for x in adv_losses[1:]:
        loss_g = loss_g + x
    total = loss_g
    dv = 0.0
    if damsm_value is not None and lam:
        weighted = T.as_tensor(damsm_value) * lam
        total = total + weighted
        dv = weighted.item()
    kl_val = 0.0
    if kl is not None and kl_weight:
        total = total + kl * kl_weight
        kl_val = kl.item()
    return LossReport([x.item() for x in adv_losses], loss_g.item(), dv, total, lam, kl_val)
