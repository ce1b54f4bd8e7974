"""Small CNN image encoder: a local feature grid plus a pooled global vector,
both linearly projected into the shared text-image space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, uniform_param
from .tensor import ContractError, Tensor


@dataclass
class ImageFeatures:
    """Projected local features ``v`` (D x N) and global vector (D,)."""

    v: Tensor
    v_global: Tensor

    @property
    def N(self) -> int:
        return self.v.shape[1]


@dataclass
class ImageBatch:
    local: Tensor  # (B, D, N)
    global_: Tensor  # (B, D)


def global_average_pool(featmap: Tensor) -> Tensor:
    """Per-channel spatial mean; accepts (C, H, W) or (B, C, H, W)."""
    if featmap.ndim == 3:
        return T.mean(featmap, axis=(1, 2))
    return T.mean(featmap, axis=(2, 3))


def to_batch(img) -> Tensor:
    """HWC float array (or a list of them) -> (B, 3, H, W) tensor."""
    if isinstance(img, Tensor):
        return img if img.ndim == 4 else T.reshape(img, (1,) + img.shape)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr.transpose(0, 3, 1, 2))


class ImageEncoder(Module):
    def __init__(self, image_side: int = 32, word_dim: int = 32, grid_side: int = 4,
                 widths=(16, 32, 64), global_width: int = 128, freeze_backbone: bool = False, seed: int = 0):
        super().__init__()
        n_down = int(round(np.log2(image_side / grid_side)))
        if n_down < 1 or grid_side * 2**n_down != image_side:
            raise ContractError(f"image side {image_side} must be grid side {grid_side} times a power of two")
        rng = np.random.default_rng(seed)
        self.image_side = image_side
        self.grid_side = grid_side
        widths = list(widths)[:n_down] + [widths[-1]] * max(0, n_down - len(widths))
        c = 3
        convs = []
        for w in widths:
            convs.append(Conv2d(rng, c, w, 3, stride=2, padding=1))
            c = w
        self.convs = convs
        self.local_width = c
        self.global_conv = Conv2d(rng, c, global_width, 3, stride=1, padding=1)
        # projection into the joint space: v = W f, v_global = W_bar f_bar
        self.proj_local = uniform_param(rng, (word_dim, c), c)
        self.proj_global = uniform_param(rng, (word_dim, global_width), global_width)
        self.freeze_backbone = freeze_backbone
        if freeze_backbone:
            for conv in self.convs + [self.global_conv]:
                conv.requires_grad_(False)

    def backbone(self, x: Tensor):
        """Return pre-projection local features f (B, C, N) and pooled global f_bar (B, C_g)."""
        if x.shape[-1] != self.image_side or x.shape[-2] != self.image_side:
            raise ContractError(f"expected {self.image_side}x{self.image_side} images, got {x.shape[-2]}x{x.shape[-1]}")
        h = x
        for conv in self.convs:
            h = T.leaky_relu(conv(h), 0.2)
        B, C, H, W = h.shape
        f = T.reshape(h, (B, C, H * W))
        g = T.leaky_relu(self.global_conv(h), 0.2)
        return f, global_average_pool(g)

    def project(self, f: Tensor, f_global: Tensor) -> ImageBatch:
        v = T.matmul(self.proj_local, f)
        vg = T.matmul(f_global, self.proj_global.T)
        return ImageBatch(v, vg)

    def encode_batch(self, images) -> ImageBatch:
        f, fg = self.backbone(to_batch(images))
        return self.project(f, fg)

    def __call__(self, img) -> ImageFeatures:
        out = self.encode_batch(img)
        return ImageFeatures(out.local[0], out.global_[0])


def encode_image(img, params: ImageEncoder) -> ImageFeatures:
    return params(img)
