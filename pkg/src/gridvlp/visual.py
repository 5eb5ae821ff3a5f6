"""Convolutional trunk and grid-feature sequence construction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nn import ConfigError, ShapeError, conv2d

TOTAL_STRIDE = 32
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


def grid_shape(height: int, width: int, stride: int = TOTAL_STRIDE) -> tuple[int, int]:
    return math.ceil(height / stride), math.ceil(width / stride)


def visual_token_count(height: int, width: int, stride: int = TOTAL_STRIDE) -> int:
    h, w = grid_shape(height, width, stride)
    return h * w


def normalize_image(image: np.ndarray, mean=PIXEL_MEAN, std=PIXEL_STD) -> torch.Tensor:
    """H×W×3 uint8 array → 3×H×W float tensor with per-channel normalization."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected H×W×3 image, got {image.shape}")
    x = torch.from_numpy(np.array(image, copy=True)).float().div_(255.0).permute(2, 0, 1)
    m = torch.tensor(mean).view(3, 1, 1)
    s = torch.tensor(std).view(3, 1, 1)
    return (x - m) / s


def pad_to_stride(images: torch.Tensor, stride: int = TOTAL_STRIDE) -> torch.Tensor:
    h, w = images.shape[-2:]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        images = F.pad(images, (0, pw, 0, ph))
    return images


def batch_images(images: Sequence[torch.Tensor], stride: int = TOTAL_STRIDE) -> torch.Tensor:
    """Zero-pad a list of 3×H×W tensors to a common multiple-of-stride size."""
    h = max(im.shape[1] for im in images)
    w = max(im.shape[2] for im in images)
    h += (-h) % stride
    w += (-w) % stride
    out = images[0].new_zeros(len(images), 3, h, w)
    for i, im in enumerate(images):
        out[i, :, : im.shape[1], : im.shape[2]] = im
    return out


@dataclass
class ScalePolicy:
    """Random resize so the short side lands in [min_short, max_short] and the
    long side stays within max_long. Normalized boxes are unaffected."""

    min_short: int = 64
    max_short: int = 96
    max_long: int = 160

    def target_size(self, height: int, width: int, rng: np.random.Generator) -> tuple[int, int]:
        short = int(rng.integers(self.min_short, self.max_short + 1))
        scale = short / min(height, width)
        if max(height, width) * scale > self.max_long:
            scale = self.max_long / max(height, width)
        return max(1, round(height * scale)), max(1, round(width * scale))

    def __call__(self, image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        h, w = self.target_size(image.shape[-2], image.shape[-1], rng)
        return F.interpolate(image.unsqueeze(0), size=(h, w), mode="bilinear",
                             align_corners=False).squeeze(0)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ResidualStage(nn.Module):
    """Stride-2 basic residual block."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = nn.Conv2d(cin, cout, 1, stride=2, bias=False)
        self.norm_sc = _norm(cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.norm1(conv2d(x, self.conv1.weight, stride=2, padding=1)))
        y = self.norm2(conv2d(y, self.conv2.weight, padding=1))
        return F.relu(y + self.norm_sc(conv2d(x, self.shortcut.weight, stride=2)))


class Backbone(nn.Module):
    """Stride-2 stem followed by four stride-2 residual stages (total stride 32)."""

    def __init__(self, stem_width: int = 16, stage_widths: Sequence[int] = (16, 32, 48, 64)):
        super().__init__()
        if len(stage_widths) != 4:
            raise ConfigError("backbone needs exactly four stage widths for stride 32")
        self.stem = nn.Conv2d(3, stem_width, 3, stride=2, padding=1, bias=False)
        self.stem_norm = _norm(stem_width)
        widths = [stem_width, *stage_widths]
        self.stages = nn.ModuleList(ResidualStage(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.out_channels = widths[-1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected B×3×H×W images, got {tuple(images.shape)}")
        if images.shape[2] < TOTAL_STRIDE or images.shape[3] < TOTAL_STRIDE:
            raise ConfigError(
                f"image {tuple(images.shape[2:])} is smaller than the backbone stride {TOTAL_STRIDE}"
            )
        x = F.relu(self.stem_norm(conv2d(images, self.stem.weight, stride=2, padding=1)))
        for stage in self.stages:
            x = stage(x)
        return x


def positional_encoding_2d(grid: tuple[int, int], d: int, temperature: float = 10000.0,
                           dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Separable sine encoding, HW×d in row-major cell order.

    Channels ``[:d/2]`` encode the row index and ``[d/2:]`` the column index,
    each as interleaved sin/cos pairs over geometric frequencies. Indices are
    normalized to (0, 2π] over the grid extent.
    """
    if d % 4:
        raise ConfigError(f"positional encoding size {d} must be divisible by 4")
    h, w = grid
    half = d // 2
    eps = 1e-6
    rows = (torch.arange(1, h + 1, dtype=torch.float64) / (h + eps)) * 2 * math.pi
    cols = (torch.arange(1, w + 1, dtype=torch.float64) / (w + eps)) * 2 * math.pi
    dim_t = temperature ** (2 * (torch.arange(half, dtype=torch.float64) // 2) / half)

    def encode(pos: torch.Tensor) -> torch.Tensor:
        angles = pos[:, None] / dim_t
        out = torch.empty(len(pos), half, dtype=torch.float64)
        out[:, 0::2] = angles[:, 0::2].sin()
        out[:, 1::2] = angles[:, 1::2].cos()
        return out

    row_code = encode(rows)[:, None, :].expand(h, w, half)
    col_code = encode(cols)[None, :, :].expand(h, w, half)
    return torch.cat([row_code, col_code], dim=-1).reshape(h * w, d).to(dtype)


@dataclass
class GridFeatureMap:
    features: torch.Tensor  # B×HW×d
    grid_shape: tuple[int, int]
    pos_encoding: torch.Tensor  # HW×d

    def __post_init__(self):
        h, w = self.grid_shape
        if self.features.shape[-2] != h * w or self.pos_encoding.shape[0] != h * w:
            raise ShapeError(
                f"grid {self.grid_shape} does not match {tuple(self.features.shape)}"
            )


class GridReducer(nn.Module):
    """1×1 convolution C→d followed by row-major flattening."""

    def __init__(self, in_channels: int, d: int):
        super().__init__()
        if d > in_channels:
            raise ConfigError(f"reduced size d={d} exceeds backbone channels C={in_channels}")
        self.proj = nn.Conv2d(in_channels, d, 1)
        self.d = d

    def forward(self, fmap: torch.Tensor) -> GridFeatureMap:
        z = conv2d(fmap, self.proj.weight, self.proj.bias)
        b, d, h, w = z.shape
        features = z.flatten(2).transpose(1, 2)
        pos = positional_encoding_2d((h, w), d, dtype=z.dtype).to(z.device)
        return GridFeatureMap(features, (h, w), pos)


class VisualEncoder(nn.Module):
    def __init__(self, d: int, stem_width: int = 16, stage_widths: Sequence[int] = (16, 32, 48, 64)):
        super().__init__()
        self.backbone = Backbone(stem_width, stage_widths)
        self.reducer = GridReducer(self.backbone.out_channels, d)

    def forward(self, images: torch.Tensor) -> GridFeatureMap:
        if images.dim() == 4 and min(images.shape[-2:]) < TOTAL_STRIDE:
            # Checked before padding, which would otherwise hide undersized inputs.
            raise ConfigError(
                f"image {tuple(images.shape[2:])} is smaller than the backbone stride {TOTAL_STRIDE}"
            )
        return self.reducer(self.backbone(pad_to_stride(images)))
