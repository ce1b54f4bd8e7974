"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from . import train, viz
from .config import RunConfig
from .data import Dataset, caption, generate_dataset, load_dataset, parse_caption, shape_mask, write_ppm
from .evaluation import RPrecisionReport, r_precision

# colours with a single dominant RGB channel
PRIMARY = {"red": 0, "green": 1, "blue": 2}


def ensure_dataset(cfg: RunConfig) -> Dataset:
    root = Path(cfg.data_dir)
    if not (root / "vocab.txt").exists():
        generate_dataset(root, cfg.seed, cfg.n_train, cfg.n_test, cfg.image_side)
    return load_dataset(root)


def load_models(cfg: RunConfig, data: Dataset, run_dir=None):
    run = Path(run_dir or cfg.out_dir)
    text, image = train.load_encoders(cfg, len(data.vocab), run / train.DAMSM_CKPT)
    gen, _ = train.load_generator(cfg, run / train.GAN_CKPT)
    return text, image, gen


def evaluate(cfg: RunConfig, data: Dataset, run_dir=None, models=None) -> RPrecisionReport:
    """R-precision of generated test images against test-caption distractors."""
    text, image, gen = models or load_models(cfg, data, run_dir)
    rng = train.stream(cfg.seed, train.EVAL)
    q = rng.integers(0, len(data.test), cfg.eval_queries)
    ids = [data.test.ids[i] for i in q]
    with threadpool_limits(1):
        imgs = train.generate(gen, text, ids, rng, cfg)
        truths = ids if cfg.eval_R == 1 else [[c] * cfg.eval_R for c in ids]
        return r_precision(imgs, truths, data.test.ids, cfg.eval_candidates, cfg.eval_R, (text, image),
                           seed=cfg.seed)


@dataclass
class SwapCase:
    source: str
    target: str
    caption: list
    before: list  # mean RGB inside the shape, original caption
    after: list  # same noise, swapped caption

    @property
    def passed(self) -> bool:
        ch = PRIMARY[self.target]
        return int(np.argmax(self.after)) == ch and self.after[ch] > self.before[ch]


@dataclass
class SwapReport:
    cases: list

    @property
    def rate(self) -> float:
        return float(np.mean([c.passed for c in self.cases])) if self.cases else 0.0

    @property
    def passed(self) -> bool:
        return self.rate > 0.5


def _shape_mean(img_chw: np.ndarray, mask: np.ndarray) -> list:
    return [float(v) for v in img_chw[:, mask].mean(axis=1)]


def color_swap(cfg: RunConfig, data: Dataset, run_dir=None, models=None, max_captions: int = 12) -> SwapReport:
    """Swap the colour word of held-out captions between red, green and blue.

    A case passes when, under identical noise, the swapped caption's image has
    the named colour as dominant channel inside the shape region and that
    channel rose relative to the original caption's image.
    """
    text, _, gen = models or load_models(cfg, data, run_dir)
    vocab = data.vocab
    seen, sources = set(), []
    for ids in data.test.ids:
        spec = parse_caption(vocab.decode(ids))
        if spec.color in PRIMARY and spec not in seen:
            seen.add(spec)
            sources.append(spec)
    sources = sources[:max_captions]
    cases = []
    with threadpool_limits(1):
        for k, spec in enumerate(sources):
            targets = [c for c in PRIMARY if c != spec.color]
            caps = [caption(spec)] + [caption(replace(spec, color=c)) for c in targets]
            noise = train.stream(cfg.seed, train.VIZ, 1, k)
            z = noise.standard_normal((1, cfg.z_dim))
            eps = noise.standard_normal((1, cfg.c_dim))
            mask = shape_mask(spec, cfg.image_side)
            with T.no_grad():
                tb = text.encode_batch([vocab.encode(c) for c in caps])
                imgs = gen(np.repeat(z, len(caps), 0), tb, np.repeat(eps, len(caps), 0)).images[-1].data
            before = _shape_mean(imgs[0], mask)
            for j, tgt in enumerate(targets, start=1):
                cases.append(SwapCase(spec.color, tgt, caps[j], before, _shape_mean(imgs[j], mask)))
    return SwapReport(cases)


def visualize(cfg: RunConfig, data: Dataset, captions, out_dir, run_dir=None, models=None) -> list[Path]:
    """Attention maps for each caption and each attention stage; returns the sidecar JSON paths."""
    text, _, gen = models or load_models(cfg, data, run_dir)
    out = Path(out_dir)
    written = []
    rng = train.stream(cfg.seed, train.VIZ, 2)
    sigma = cfg.viz_sigma or None
    for n, cap in enumerate(captions):
        tokens = cap.split() if isinstance(cap, str) else list(cap)
        ids = data.vocab.encode(tokens)
        with T.no_grad():
            tb = text.encode_batch([ids])
            res = gen(rng.standard_normal((1, cfg.z_dim)), tb, rng.standard_normal((1, cfg.c_dim)))
        for i, att in enumerate(res.attentions, start=1):
            maps = viz.attention_maps(att.weights.data[0], cfg.image_side, sigma, cfg.viz_topk, tokens)
            meta = viz.export_maps(maps, out / f"caption_{n:02d}" / f"stage_{i}",
                                   extra={"caption": tokens, "stage": i})
            written.append(meta)
        write_ppm(out / f"caption_{n:02d}" / "image.ppm", res.images[-1].data[0].transpose(1, 2, 0))
    return written

