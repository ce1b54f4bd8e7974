"""Captioned-shapes dataset: rendering, captions, on-disk layout, and netpbm I/O."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .text_encoder import PAD, Vocabulary

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
SIZES = ("small", "big")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
BACKGROUNDS = {"black": (0.0, 0.0, 0.0), "gray": (0.5, 0.5, 0.5)}
TEMPLATE_WORDS = ("a", "at", "on", "background")


@dataclass(frozen=True, order=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    position: str
    background: str

    def __post_init__(self):
        if (self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES
                or self.position not in POSITIONS or self.background not in BACKGROUNDS):
            raise ValueError(f"invalid scene spec {self}")


@dataclass
class CaptionedImage:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    caption: list
    spec: SceneSpec


def all_specs() -> list[SceneSpec]:
    return [SceneSpec(s, c, z, p, b) for s, c, z, p, b in
            itertools.product(SHAPES, COLORS, SIZES, POSITIONS, BACKGROUNDS)]


def vocabulary() -> Vocabulary:
    words = list(TEMPLATE_WORDS) + list(SIZES) + list(COLORS) + list(SHAPES) + list(POSITIONS) + list(BACKGROUNDS)
    return Vocabulary([PAD] + words)


def caption(spec: SceneSpec) -> list[str]:
    return ["a", spec.size, spec.color, spec.shape, "at", spec.position, "on", "a", spec.background, "background"]


def parse_caption(tokens) -> SceneSpec:
    if isinstance(tokens, str):
        tokens = tokens.split()
    tokens = list(tokens)
    if len(tokens) != 10 or [tokens[i] for i in (0, 4, 6, 7, 9)] != ["a", "at", "on", "a", "background"]:
        raise ValueError(f"not a template caption: {' '.join(tokens)}")
    return SceneSpec(shape=tokens[3], color=tokens[2], size=tokens[1], position=tokens[5], background=tokens[8])


def _center(position: str, side: int) -> tuple[float, float]:
    q, h = side / 4.0, side / 2.0
    return {
        "top-left": (q, q),
        "top-right": (q, 3 * q),
        "bottom-left": (3 * q, q),
        "bottom-right": (3 * q, 3 * q),
        "center": (h, h),
    }[position]


def shape_mask(spec: SceneSpec, side: int) -> np.ndarray:
    """Boolean (side, side) mask of pixels covered by the shape."""
    cy, cx = _center(spec.position, side)
    r = side * (0.2 if spec.size == "big" else 0.1)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    if spec.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if spec.shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if spec.shape == "triangle":
        # apex up, base at cy + r
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    arm = r / 3.0
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def render(spec: SceneSpec, side: int = 32) -> np.ndarray:
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    img = np.empty((side, side, 3))
    img[:] = BACKGROUNDS[spec.background]
    img[shape_mask(spec, side)] = COLORS[spec.color]
    return quantize(img)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so rendered arrays equal their PPM round trip."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# -- netpbm -------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return raw[pos + 1:], w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P6")
    return np.frombuffer(data[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P5")
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- dataset ------------------------------------------------------------------


def split_specs(seed: int) -> tuple[list[SceneSpec], list[SceneSpec]]:
    """Disjoint train/test spec sets.

    The test side takes whole color families: a few (shape, size, position,
    background) layouts with all five colors, so every test layout has
    color-swapped partners and no test spec is seen in training.
    """
    rng = np.random.default_rng([seed, 0])
    layouts = list(itertools.product(SHAPES, SIZES, POSITIONS, BACKGROUNDS))
    order = rng.permutation(len(layouts))
    n_test_layouts = max(1, len(layouts) // 5)
    test_layouts = {layouts[i] for i in order[:n_test_layouts]}
    train, test = [], []
    for spec in all_specs():
        key = (spec.shape, spec.size, spec.position, spec.background)
        (test if key in test_layouts else train).append(spec)
    return train, test


def _draw(rng, pool: list[SceneSpec], n: int) -> list[SceneSpec]:
    # cover the pool evenly: whole shuffled passes, then a partial one
    out = []
    while len(out) < n:
        out.extend(pool[i] for i in rng.permutation(len(pool)))
    return out[:n]


def generate_dataset(root, seed: int = 0, n_train: int = 500, n_test: int = 100, side: int = 32) -> Path:
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    root = Path(root)
    train_pool, test_pool = split_specs(seed)
    rng = np.random.default_rng([seed, 1])
    splits = {"train": _draw(rng, train_pool, n_train), "test": _draw(rng, test_pool, n_test)}
    root.mkdir(parents=True, exist_ok=True)
    vocabulary().save(root / "vocab.txt")
    for name, specs in splits.items():
        d = root / name
        d.mkdir(exist_ok=True)
        for idx, spec in enumerate(specs):
            write_ppm(d / f"{idx}.ppm", render(spec, side))
            (d / f"{idx}.txt").write_text(" ".join(caption(spec)) + "\n", encoding="utf-8")
    return root


@dataclass
class Split:
    images: np.ndarray  # (n, H, W, 3)
    captions: list  # token lists
    ids: list  # index lists

    def __len__(self) -> int:
        return len(self.captions)


@dataclass
class Dataset:
    vocab: Vocabulary
    train: Split
    test: Split


def _load_split(d: Path, vocab: Vocabulary) -> Split:
    n = len(list(d.glob("*.txt")))
    imgs, caps = [], []
    for idx in range(n):
        imgs.append(read_ppm(d / f"{idx}.ppm"))
        caps.append((d / f"{idx}.txt").read_text(encoding="utf-8").split())
    return Split(np.stack(imgs), caps, [vocab.encode(c) for c in caps])


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "vocab.txt").exists():
        raise FileNotFoundError(f"no dataset at {root} (missing vocab.txt)")
    vocab = Vocabulary.load(root / "vocab.txt")
    return Dataset(vocab, _load_split(root / "train", vocab), _load_split(root / "test", vocab))
