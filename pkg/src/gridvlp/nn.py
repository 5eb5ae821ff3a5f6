"""Differentiable building blocks shared by every model component.

Autodiff comes from torch; the blocks here add explicit shape contracts,
masked attention with a defined fallback for fully-masked rows, and the
initialization conventions used throughout the package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    """Raised when a tensor does not match the declared shape contract."""


class ConfigError(ValueError):
    """Raised for invalid hyperparameter combinations."""


@dataclass(frozen=True)
class TensorSpec:
    """Expected shape (``None`` = any size) and optional dtype of a tensor."""

    shape: tuple[Optional[int], ...]
    dtype: Optional[torch.dtype] = None

    def __post_init__(self):
        for dim in self.shape:
            if dim is not None and dim <= 0:
                raise ShapeError(f"dimensions must be positive, got {self.shape}")

    def check(self, tensor: torch.Tensor, name: str = "tensor") -> torch.Tensor:
        if tensor.dim() != len(self.shape):
            raise ShapeError(
                f"{name}: expected rank {len(self.shape)} {self.shape}, got {tuple(tensor.shape)}"
            )
        for i, (want, got) in enumerate(zip(self.shape, tensor.shape)):
            if want is not None and want != got:
                raise ShapeError(
                    f"{name}: dim {i} expected {want}, got {got} (shape {tuple(tensor.shape)})"
                )
        if self.dtype is not None and tensor.dtype != self.dtype:
            raise ShapeError(f"{name}: expected dtype {self.dtype}, got {tensor.dtype}")
        return tensor


@dataclass
class AttentionConfig:
    hidden_size: int = 256
    num_heads: int = 8
    ffn_size: int = 1024
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def validate(self) -> None:
        if self.hidden_size <= 0 or self.num_heads <= 0 or self.ffn_size <= 0:
            raise ConfigError("hidden_size, num_heads and ffn_size must be positive")
        if self.hidden_size % self.num_heads:
            hint = ""
            if self.num_heads == 12:
                # 256 hidden units with 12 heads has no integral head size.
                hint = " (use hidden_size=264 for 12 heads, or num_heads=8 with 256)"
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads "
                f"{self.num_heads}{hint}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal init for linear/embedding weights, fan-in for convs."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (LayerNorm, nn.GroupNorm)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


def layer_norm(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Normalize the last dimension to zero mean and unit variance (no affine)."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {x.shape[-1]}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.eps) * self.weight + self.bias


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of ``x`` (C_in×H×W or B×C_in×H×W) with ``kernel``."""
    if kernel.dim() != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be C_out×C_in×k×k, got {tuple(kernel.shape)}")
    if stride < 1 or kernel.shape[2] < 1 or padding < 0:
        raise ConfigError(f"invalid conv config stride={stride} padding={padding}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {tuple(x.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    k = kernel.shape[2]
    h_out = conv_output_size(x.shape[2], k, stride, padding)
    w_out = conv_output_size(x.shape[3], k, stride, padding)
    if h_out <= 0 or w_out <= 0:
        raise ConfigError(
            f"conv output would be {h_out}×{w_out} for input {tuple(x.shape[2:])}, k={k}"
        )
    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    return out.squeeze(0) if unbatched else out


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``num_heads`` heads.

    ``mask`` is boolean with True meaning "may attend". Query rows whose mask
    is entirely False produce a zero output vector instead of NaN; each such
    row increments ``empty_rows``.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_size
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.empty_rows = 0

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        unbatched = query.dim() == 2
        if unbatched:
            query, key, value = query.unsqueeze(0), key.unsqueeze(0), value.unsqueeze(0)
            if mask is not None:
                mask = mask.unsqueeze(0)
        d, h = self.cfg.hidden_size, self.cfg.num_heads
        b, lq = query.shape[0], query.shape[1]
        lk = key.shape[1]
        TensorSpec((b, lq, d)).check(query, "query")
        TensorSpec((b, lk, d)).check(key, "key")
        TensorSpec((b, lk, d)).check(value, "value")
        if mask is not None:
            TensorSpec((b, lq, lk), torch.bool).check(mask, "mask")

        hd = d // h
        q = self.q_proj(query).view(b, lq, h, hd).transpose(1, 2)
        k = self.k_proj(key).view(b, lk, h, hd).transpose(1, 2)
        v = self.v_proj(value).view(b, lk, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)

        empty = None
        if mask is not None:
            m = mask.unsqueeze(1)
            empty = ~mask.any(dim=-1)
            if bool(empty.any()):
                self.empty_rows += int(empty.sum())
                # Keep fully-masked rows finite; their weights are zeroed below.
                m = m | empty.unsqueeze(1).unsqueeze(-1)
            scores = scores.masked_fill(~m, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if empty is not None and bool(empty.any()):
            weights = weights.masked_fill(empty.unsqueeze(1).unsqueeze(-1), 0.0)
        weights = self.dropout(weights)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, d)
        out = self.out_proj(out)
        if empty is not None and bool(empty.any()):
            out = out.masked_fill(empty.unsqueeze(-1), 0.0)
        return out.squeeze(0) if unbatched else out


def multi_head_attention(
    attn: MultiHeadAttention,
    query_seq: torch.Tensor,
    key_value_seq: torch.Tensor,
    attn_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    return attn(query_seq, key_value_seq, key_value_seq, attn_mask)


class FeedForward(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.hidden_size, cfg.ffn_size)
        self.fc2 = nn.Linear(cfg.ffn_size, cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class MLP(nn.Module):
    """Stack of linear layers with ReLU between them."""

    def __init__(self, dims: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def causal_mask(length: int, device=None) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def with_pos(x: torch.Tensor, pos: Optional[torch.Tensor]) -> torch.Tensor:
    return x if pos is None else x + pos
