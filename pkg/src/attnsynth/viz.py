"""Attention diagnostics: thresholded per-word maps, smoothed heatmaps, most-attended words."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import write_pgm
from .tensor import ContractError, Tensor


@dataclass
class AttentionMapSet:
    grids: np.ndarray  # (T, side_n, side_n) suppressed weights per word
    heatmaps: np.ndarray  # (T, S, S) before display normalization
    top: list  # [(word index, score)]
    words: list = field(default_factory=list)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def suppress(beta, T: int | None = None) -> np.ndarray:
    """Zero every weight not strictly above the uniform level 1/T."""
    b = _array(beta)
    T = b.shape[-1] if T is None else T
    return np.where(b > 1.0 / T, b, 0.0)


def grid_side(N: int) -> int:
    s = math.isqrt(N)
    if s * s != N:
        raise ContractError(f"attention over {N} regions cannot form a square grid")
    return s


def bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a square grid; samples outside the grid clamp to the edge."""
    n = grid.shape[0]
    pos = (np.arange(size) + 0.5) * n / size - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    rows = grid[lo] * (1 - w)[:, None] + grid[hi] * w[:, None]
    return rows[:, lo] * (1 - w)[None, :] + rows[:, hi] * w[None, :]


def word_heatmap(column, N: int, image_side: int, sigma: float | None = None) -> np.ndarray:
    """Row-major reshape to a square grid, bilinear upsample, Gaussian smoothing (edge-clamped, 3 sigma)."""
    side = grid_side(N)
    col = _array(column).reshape(-1)
    if col.size != N:
        raise ContractError(f"column has {col.size} entries, expected {N}")
    sigma = image_side / 16 if sigma is None else sigma
    up = bilinear_upsample(col.reshape(side, side), image_side)
    if sigma <= 0:
        return up
    return ndimage.gaussian_filter(up, sigma, mode="nearest", truncate=3.0)


def display_normalize(heat: np.ndarray) -> np.ndarray:
    """Per-map rescale to [0, 1]; an all-zero map stays zero."""
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def top_attended_words(beta_hat, k: int = 5) -> list[int]:
    """Word indices by descending column sum; ties go to the lower index."""
    b = _array(beta_hat)
    if k > b.shape[-1]:
        raise ContractError(f"k={k} exceeds word count {b.shape[-1]}")
    scores = b.sum(axis=0)
    return [int(i) for i in np.lexsort((np.arange(len(scores)), -scores))[:k]]


def attention_maps(beta, image_side: int, sigma: float | None = None, k: int = 5, words=None) -> AttentionMapSet:
    """Full diagnostic set for one (N, T) attention matrix."""
    b = _array(beta)
    N, T = b.shape
    side = grid_side(N)
    bh = suppress(b, T)
    grids = np.stack([bh[:, i].reshape(side, side) for i in range(T)])
    heats = np.stack([word_heatmap(bh[:, i], N, image_side, sigma) for i in range(T)])
    idx = top_attended_words(bh, min(k, T))
    scores = bh.sum(axis=0)
    return AttentionMapSet(grids, heats, [(i, float(scores[i])) for i in idx], list(words or []))


def export_maps(maps: AttentionMapSet, out_dir, prefix: str = "attn", extra: dict | None = None) -> Path:
    """Write one PGM per top word plus ``<prefix>.json`` describing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rank, (i, score) in enumerate(maps.top):
        name = f"{prefix}_{rank}_w{i}.pgm"
        write_pgm(out / name, display_normalize(maps.heatmaps[i]))
        word = maps.words[i] if i < len(maps.words) else None
        entries.append({"rank": rank, "index": i, "word": word, "score": score, "file": name,
                        "raw_mass": float(maps.heatmaps[i].sum())})
    meta = out / f"{prefix}.json"
    meta.write_text(json.dumps({**(extra or {}), "words": maps.words, "top": entries}, indent=2) + "\n", encoding="utf-8")
    return meta
