"""R-precision: query captions with generated images using the pretrained encoders' global vectors."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError


@dataclass
class RPrecisionReport:
    n_queries: int
    candidates_per_query: int
    R: int
    mean: float
    hits: list
    std_error: float
    half_width: float  # 1.96 standard errors

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + 1e-8)


def rank_candidates(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate indices by descending cosine similarity; ties keep the lower index first."""
    sims = _unit_rows(candidates) @ (query / (np.linalg.norm(query) + 1e-8))
    return np.argsort(-sims, kind="stable")


def image_globals(images, image_encoder, chunk: int = 100) -> np.ndarray:
    """Global vectors for (n, 3, S, S) or (n, S, S, 3) images."""
    arr = images.data if isinstance(images, T.Tensor) else np.asarray(images, dtype=np.float64)
    if arr.shape[-1] == 3 and arr.shape[1] != 3:
        arr = arr.transpose(0, 3, 1, 2)
    out = []
    with T.no_grad():
        for s in range(0, len(arr), chunk):
            out.append(image_encoder.encode_batch(T.Tensor(arr[s:s + chunk])).global_.data)
    return np.concatenate(out)


def caption_globals(captions, text_encoder, chunk: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(captions), chunk):
            out.append(text_encoder.encode_batch(captions[s:s + chunk]).sentence.data)
    return np.concatenate(out)


def r_precision(gen_images, true_captions, distractor_pool, candidates_per_query: int = 100, R: int = 1,
                encoders=None, seed: int = 0) -> RPrecisionReport:
    """Fraction r/R of relevant captions in the top R, averaged over queries.

    ``true_captions[q]`` is one token-id list (R = 1) or a list of R of them.
    Each query's candidate list is its truths followed by mismatches sampled
    without replacement from ``distractor_pool`` (entries equal to a truth are
    never sampled). ``encoders`` is (text_encoder, image_encoder).
    """
    if not 1 <= R <= candidates_per_query:
        raise ContractError(f"need 1 <= R <= candidates, got R={R}, candidates={candidates_per_query}")
    text_enc, image_enc = encoders
    truths = [[tuple(c)] if np.ndim(c[0]) == 0 else [tuple(x) for x in c] for c in true_captions]
    if any(len(t) != R for t in truths):
        raise ContractError(f"every query needs exactly R={R} ground-truth captions")
    n_mis = candidates_per_query - R

    pool = list(dict.fromkeys(tuple(c) for c in distractor_pool))
    all_caps = list(dict.fromkeys(pool + [c for t in truths for c in t]))
    index = {c: i for i, c in enumerate(all_caps)}
    cap_vecs = caption_globals([list(c) for c in all_caps], text_enc)
    img_vecs = image_globals(gen_images, image_enc)
    if len(img_vecs) != len(truths):
        raise ContractError(f"{len(img_vecs)} images for {len(truths)} queries")

    rng = np.random.default_rng(seed)
    hits = []
    for q, truth in enumerate(truths):
        tset = set(truth)
        options = [c for c in pool if c not in tset]
        if len(options) < n_mis:
            raise ContractError(f"query {q}: only {len(options)} distractors for {n_mis} mismatches")
        picks = rng.choice(len(options), size=n_mis, replace=False)
        cands = list(truth) + [options[i] for i in picks]
        order = rank_candidates(img_vecs[q], cap_vecs[[index[c] for c in cands]])
        hits.append(int(np.sum(order[:R] < R)) / R)
    n = len(hits)
    mean = float(np.mean(hits))
    se = math.sqrt(max(mean * (1 - mean), 0.0) / n) if R == 1 else float(np.std(hits) / math.sqrt(n))
    return RPrecisionReport(n, candidates_per_query, R, mean, hits, se, 1.96 * se)
