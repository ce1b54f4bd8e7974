"""Two-phase training: matching-model pretraining on real pairs, then alternating GAN training."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import tensor as T
from .config import ConfigError, RunConfig
from .damsm import damsm_loss
from .data import Dataset, write_ppm
from .gan_losses import Discriminators, discriminator_loss, generator_adv_loss, total_objective
from .generator import Generator, kl_divergence
from .image_encoder import ImageEncoder
from .nn import Adam
from .tensor import Tensor
from .text_encoder import TextBatch, TextEncoder

log = logging.getLogger(__name__)

# seed-stream tags: one master seed fans out to independent generators
INIT_TEXT, INIT_IMAGE, INIT_GEN, INIT_DISC = 10, 11, 12, 13
DAMSM_ORDER, GAN_ORDER, GAN_NOISE, EVAL, VIZ = 20, 21, 22, 30, 31

DAMSM_CKPT = "damsm.ckpt"
GAN_CKPT = "gan.ckpt"
DAMSM_LOG = "damsm_log.ndjson"
GAN_LOG = "gan_log.ndjson"
TIMING_LOG = "timing.ndjson"


class TrainingError(RuntimeError):
    pass


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


class RunLog:
    """Append-only NDJSON log. Wall-clock timings go to a separate file so the
    main log is a pure function of the seed."""

    def __init__(self, path: Path, timing_path: Path | None = None, append: bool = False):
        self.path = path
        self.timing_path = timing_path
        mode = "a" if append else "w"
        self._fh = open(path, mode, encoding="utf-8")
        self._th = open(timing_path, "a", encoding="utf-8") if timing_path else None
        self._t0 = time.perf_counter()
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self._th:
            key = {k: record[k] for k in ("phase", "epoch", "step")}
            self._th.write(json.dumps({**key, "wall_time": time.perf_counter() - self._t0}) + "\n")

    def close(self) -> None:
        self._fh.close()
        if self._th:
            self._th.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def build_encoders(cfg: RunConfig, vocab_size: int):
    text = TextEncoder(vocab_size, cfg.embed_dim, cfg.word_dim, cfg.max_len, seed=[cfg.seed, INIT_TEXT])
    image = ImageEncoder(cfg.image_side, cfg.word_dim, cfg.grid_side, freeze_backbone=cfg.freeze_backbone,
                         seed=[cfg.seed, INIT_IMAGE])
    return text, image


def build_gan(cfg: RunConfig):
    gen = Generator(cfg.stages, cfg.image_side, cfg.word_dim, cfg.hidden_dim, cfg.z_dim, cfg.c_dim,
                    seed=[cfg.seed, INIT_GEN])
    disc = Discriminators(cfg.stage_sides, cfg.word_dim, cfg.disc_width, seed=[cfg.seed, INIT_DISC])
    return gen, disc


def _check_finite(value: float, phase: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss in {phase} at epoch {epoch}, step {step}")


@contextmanager
def _step_guard(phase: str, epoch: int, step: int):
    try:
        yield
    except T.NumericError as exc:
        raise TrainingError(f"non-finite values in {phase} at epoch {epoch}, step {step}: {exc}") from exc


def images_to_tensor(images: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter (n, H, W, 3) images by an integer factor."""
    if factor == 1:
        return images
    n, h, w, c = images.shape
    return images.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


# -- phase 1 ------------------------------------------------------------------


def _damsm_state(text, image, opt, epoch, step):
    state = OrderedDict()
    state.update(ckpt.prefixed("text", text.state_dict()))
    state.update(ckpt.prefixed("image", image.state_dict()))
    if opt is not None:
        state.update(opt.state("opt"))
        state["meta.epoch"] = np.array([float(epoch)])
        state["meta.step"] = np.array([float(step)])
    return state


def load_encoders(cfg: RunConfig, vocab_size: int, path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"encoder checkpoint not found: {path} (run pretrain-damsm first)")
    state = ckpt.load(path)
    text, image = build_encoders(cfg, vocab_size)
    text.load_state_dict(ckpt.select("text", state))
    image.load_state_dict(ckpt.select("image", state))
    return text, image


def pretrain_damsm(cfg: RunConfig, data: Dataset, out_dir, resume: bool = False, max_epochs: int | None = None):
    """Minimize the matching loss on real image-caption pairs.

    Writes ``damsm.ckpt`` (encoders + optimizer state) after every epoch and a
    per-step NDJSON log. Returns (text_encoder, image_encoder, log records).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, image = build_encoders(cfg, len(data.vocab))
    params = [p for p in text.parameters() + image.parameters() if p.requires_grad]
    opt = Adam(params, lr=cfg.damsm_lr, betas=cfg.damsm_betas)
    start_epoch, step = 0, 0
    if resume and (out / DAMSM_CKPT).exists():
        state = ckpt.load(out / DAMSM_CKPT)
        text.load_state_dict(ckpt.select("text", state))
        image.load_state_dict(ckpt.select("image", state))
        opt.load_state("opt", state)
        start_epoch = int(state["meta.epoch"][0]) + 1
        step = int(state["meta.step"][0])
    n = len(data.train)
    M = min(cfg.batch_damsm, n)
    if M < 2:
        raise ConfigError("matching-model pretraining needs at least 2 pairs per batch")
    images = data.train.images
    end_epoch = cfg.damsm_epochs if max_epochs is None else min(cfg.damsm_epochs, start_epoch + max_epochs)
    with threadpool_limits(1), RunLog(out / DAMSM_LOG, out / TIMING_LOG, append=start_epoch > 0) as rl:
        for epoch in range(start_epoch, end_epoch):
            order = stream(cfg.seed, DAMSM_ORDER, epoch).permutation(n)
            for b in range(n // M):
                idx = order[b * M:(b + 1) * M]
                with _step_guard("damsm", epoch, step):
                    tb = text.encode_batch([data.train.ids[i] for i in idx])
                    ib = image.encode_batch(images_to_tensor(images[idx]))
                    loss = damsm_loss(ib, tb, cfg.gamma1, cfg.gamma2, cfg.gamma3)
                    rec = {"phase": "damsm", "epoch": epoch, "step": step, **loss.report()}
                    _check_finite(rec["loss_damsm"], "damsm", epoch, step)
                    opt.zero_grad()
                    loss.total.backward()
                    opt.step()
                rl.write(rec)
                step += 1
            ckpt.save(out / DAMSM_CKPT, _damsm_state(text, image, opt, epoch, step))
            log.info("damsm epoch %d loss %.4f", epoch, rec["loss_damsm"])
        records = rl.records
    return text, image, records


# -- phase 2 ------------------------------------------------------------------


def encode_captions(text: TextEncoder, ids, chunk: int = 256) -> TextBatch:
    """Frozen-encoder features for many captions, padded to a common length."""
    parts = []
    with T.no_grad():
        for s in range(0, len(ids), chunk):
            parts.append(text.encode_batch(ids[s:s + chunk]))
    Tm = max(p.words.shape[2] for p in parts)
    words, masks = [], []
    for p in parts:
        pad = Tm - p.words.shape[2]
        words.append(np.pad(p.words.data, ((0, 0), (0, 0), (0, pad))))
        masks.append(np.pad(p.mask, ((0, 0), (0, pad))))
    return TextBatch(Tensor(np.concatenate(words)), Tensor(np.concatenate([p.sentence.data for p in parts])),
                     np.concatenate(masks))


def take(tb: TextBatch, idx) -> TextBatch:
    mask = tb.mask[idx]
    Tm = int(mask.sum(axis=1).max())
    return TextBatch(Tensor(tb.words.data[idx][:, :, :Tm]), Tensor(tb.sentence.data[idx]), mask[:, :Tm])


def _gan_state(gen, disc, opt_g, opt_d, epoch, step):
    state = OrderedDict()
    state.update(ckpt.prefixed("gen", gen.state_dict()))
    state.update(ckpt.prefixed("disc", disc.state_dict()))
    state.update(opt_g.state("opt_g"))
    state.update(opt_d.state("opt_d"))
    state["meta.epoch"] = np.array([float(epoch)])
    state["meta.step"] = np.array([float(step)])
    return state


def load_generator(cfg: RunConfig, path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"generator checkpoint not found: {path} (run train first)")
    state = ckpt.load(path)
    gen, disc = build_gan(cfg)
    gen.load_state_dict(ckpt.select("gen", state))
    disc.load_state_dict(ckpt.select("disc", state))
    return gen, disc


def train_gan(cfg: RunConfig, data: Dataset, out_dir, encoder_path=None):
    """Alternate discriminator and generator updates.

    Each step: (1) every stage discriminator minimizes its real/fake loss with
    detached fakes; (2) the generator minimizes the sum of stage adversarial
    losses plus lambda times the matching loss of the last stage's images
    (divided by the batch size when ``damsm_reduction == "mean"``; the logged
    ``loss_damsm`` is always the batch sum). The matching encoders stay frozen.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder_path = Path(encoder_path) if encoder_path else out / DAMSM_CKPT
    text, image = load_encoders(cfg, len(data.vocab), encoder_path)
    text.requires_grad_(False)
    image.requires_grad_(False)
    gen, disc = build_gan(cfg)
    opt_g = Adam(gen.parameters(), lr=cfg.g_lr, betas=cfg.gan_betas)
    opt_d = Adam(disc.parameters(), lr=cfg.d_lr, betas=cfg.gan_betas)

    feats = encode_captions(text, data.train.ids)
    sides = cfg.stage_sides
    reals = [downsample(data.train.images, cfg.image_side // s) for s in sides]
    n = len(data.train)
    B = min(cfg.gan_batch, n)
    step = 0
    with threadpool_limits(1), RunLog(out / GAN_LOG, out / TIMING_LOG) as rl:
        for epoch in range(cfg.gan_epochs):
            order = stream(cfg.seed, GAN_ORDER, epoch).permutation(n)
            for b in range(n // B):
                idx = np.sort(order[b * B:(b + 1) * B])
                tb = take(feats, idx)
                with _step_guard("gan", epoch, step):
                    z, eps = _noise(cfg, step, B)
                    fake = gen(z, tb, eps)
                    rec = {"phase": "gan", "epoch": epoch, "step": step}

                    disc.requires_grad_(True)
                    d_total = None
                    for i in range(cfg.stages):
                        real_i = images_to_tensor(reals[i][idx])
                        d_i, d_u, d_c = discriminator_loss(real_i, fake.images[i], tb.sentence, disc, i,
                                                           cfg.mismatch_real)
                        rec[f"loss_d{i}"] = d_i.item()
                        rec[f"loss_d{i}_uncond"] = d_u.item()
                        rec[f"loss_d{i}_cond"] = d_c.item()
                        d_total = d_i if d_total is None else d_total + d_i
                    _check_finite(d_total.item(), "gan/D", epoch, step)
                    opt_d.zero_grad()
                    d_total.backward()
                    opt_d.step()

                    disc.requires_grad_(False)
                    adv = generator_adv_loss(fake.images, tb.sentence, disc)
                    damsm_total = None
                    if cfg.lambda_damsm > 0:
                        dl = damsm_loss(image.encode_batch(fake.images[-1]), tb, cfg.gamma1, cfg.gamma2, cfg.gamma3)
                        damsm_total = dl.total
                        if cfg.damsm_reduction == "mean":
                            damsm_total = damsm_total * (1.0 / B)
                        rec.update(dl.report())
                    kl = kl_divergence(fake.mu, fake.logvar) if cfg.ca_kl_weight else None
                    report = total_objective(adv, damsm_total, cfg.lambda_damsm, kl, cfg.ca_kl_weight)
                    rec.update(report.as_dict())
                    _check_finite(rec["total"], "gan/G", epoch, step)
                    opt_g.zero_grad()
                    report.total.backward()
                    opt_g.step()
                rl.write(rec)
                step += 1
            last = epoch == cfg.gan_epochs - 1
            if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                ckpt.save(out / GAN_CKPT, _gan_state(gen, disc, opt_g, opt_d, epoch, step))
                save_sample_grid(cfg, gen, text, data, out / "samples" / f"epoch_{epoch:04d}.ppm")
            log.info("gan epoch %d: %s", epoch, {k: round(v, 4) for k, v in rec.items() if k.startswith("loss")})
        records = rl.records
    disc.requires_grad_(True)
    return gen, disc, records


def _noise(cfg: RunConfig, step: int, batch: int):
    rng = stream(cfg.seed, GAN_NOISE, step)
    return rng.standard_normal((batch, cfg.z_dim)), rng.standard_normal((batch, cfg.c_dim))


def generate(gen: Generator, text: TextEncoder, ids, rng: np.random.Generator, cfg: RunConfig, chunk: int = 50):
    """Last-stage images (n, 3, S, S) for caption ids, with noise drawn from ``rng``."""
    out = []
    with T.no_grad():
        for s in range(0, len(ids), chunk):
            part = ids[s:s + chunk]
            tb = text.encode_batch(part)
            z = rng.standard_normal((len(part), cfg.z_dim))
            eps = rng.standard_normal((len(part), cfg.c_dim))
            out.append(gen(z, tb, eps).images[-1].data)
    return np.concatenate(out)


def save_sample_grid(cfg: RunConfig, gen, text, data: Dataset, path, rows: int = 4) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = min(rows * rows, len(data.test))
    ids = data.test.ids[:k]
    imgs = generate(gen, text, ids, stream(cfg.seed, VIZ, 0), cfg)
    S = cfg.image_side
    grid = np.zeros((rows * S, rows * S, 3))
    for n in range(k):
        r, c = divmod(n, rows)
        grid[r * S:(r + 1) * S, c * S:(c + 1) * S] = imgs[n].transpose(1, 2, 0)
    write_ppm(path, grid)
