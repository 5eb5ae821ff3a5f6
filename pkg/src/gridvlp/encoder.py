"""Cross-modal transformer encoder over [text ‖ image] plus its MLM and ITM heads."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nn import (AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention, ShapeError,
                 with_pos)
from .text import Vocabulary
from .visual import GridFeatureMap

log = logging.getLogger(__name__)

MASK_RATE = 0.15
IGNORE = -100


class EncoderLayer(nn.Module):
    """Post-norm block; positional codes are added to queries and keys only."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg)
        self.ffn = FeedForward(cfg)
        self.norm1 = LayerNorm(cfg.hidden_size)
        self.norm2 = LayerNorm(cfg.hidden_size)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, pos, mask):
        qk = with_pos(x, pos)
        x = self.norm1(x + self.dropout(self.self_attn(qk, qk, x, mask)))
        return self.norm2(x + self.dropout(self.ffn(x)))


@dataclass
class CrossModalState:
    layer_outputs: list[torch.Tensor]  # each B×L×d
    text_span: slice
    image_span: slice
    key_mask: torch.Tensor  # B×L, True for real (non-pad) positions
    pos: torch.Tensor  # L×d; zeros over text, grid codes over image
    grid_shape: tuple[int, int]

    @property
    def final(self) -> torch.Tensor:
        return self.layer_outputs[-1]

    @property
    def cls_vector(self) -> torch.Tensor:
        return self.final[:, 0]

    @property
    def text(self) -> torch.Tensor:
        return self.final[:, self.text_span]

    @property
    def image(self) -> torch.Tensor:
        return self.final[:, self.image_span]

    def select(self, index) -> "CrossModalState":
        index = torch.as_tensor(index, dtype=torch.long)
        return CrossModalState([h[index] for h in self.layer_outputs], self.text_span,
                               self.image_span, self.key_mask[index], self.pos, self.grid_shape)


class CrossModalEncoder(nn.Module):
    def __init__(self, cfg: AttentionConfig, num_layers: int = 6):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(num_layers))

    def forward(self, text: torch.Tensor, text_mask: torch.Tensor, image: GridFeatureMap,
                block_text_to_image: bool = False,
                drop_pos_at_layer: Optional[int] = None) -> CrossModalState:
        """Full self-attention over the concatenated sequence.

        ``block_text_to_image`` stops text rows attending to image keys and
        ``drop_pos_at_layer`` zeroes the image codes at one layer; both are
        diagnostics and off in normal use.
        """
        d = self.cfg.hidden_size
        feats = image.features
        if text.shape[-1] != d or feats.shape[-1] != d:
            raise ShapeError(f"text ({text.shape[-1]}) and image ({feats.shape[-1]}) must share d={d}")
        if text.shape[0] != feats.shape[0]:
            raise ShapeError("text and image batch sizes differ")
        b, lt = text.shape[:2]
        hw = feats.shape[1]
        x = torch.cat([text, feats], dim=1)
        pos = torch.cat([image.pos_encoding.new_zeros(lt, d), image.pos_encoding], dim=0)
        key_mask = torch.cat([text_mask, text_mask.new_ones(b, hw)], dim=1)
        mask = key_mask[:, None, :].expand(b, lt + hw, lt + hw)
        if block_text_to_image:
            mask = mask.clone()
            mask[:, :lt, lt:] = False
        outputs = []
        for k, layer in enumerate(self.layers):
            x = layer(x, None if k == drop_pos_at_layer else pos, mask)
            outputs.append(x)
        return CrossModalState(outputs, slice(0, lt), slice(lt, lt + hw), key_mask, pos,
                               image.grid_shape)


# --- masked language modelling ----------------------------------------------

@dataclass
class MlmBatchMask:
    positions: list[tuple[int, int]]  # (batch row, token index)
    original_ids: list[int]
    corruption: list[str]  # "MASK" | "RANDOM" | "KEEP"

    def labels(self, shape: tuple[int, int], rows: Optional[set] = None) -> torch.Tensor:
        """Target ids at masked positions, IGNORE elsewhere (optionally only ``rows``)."""
        out = torch.full(shape, IGNORE, dtype=torch.long)
        for (b, t), tok in zip(self.positions, self.original_ids):
            if rows is None or b in rows:
                out[b, t] = tok
        return out


def sample_mlm_mask(token_ids: torch.Tensor, attention_mask: torch.Tensor, vocab: Vocabulary,
                    rng: np.random.Generator, rate: float = MASK_RATE,
                    ) -> tuple[torch.Tensor, MlmBatchMask]:
    """Select ~``rate`` of the non-special tokens; 80% → [MASK], 10% random, 10% kept."""
    ids = token_ids.clone()
    specials = vocab.special_ids
    normal = [i for i in range(len(vocab)) if i not in specials]
    positions, originals, kinds = [], [], []
    for b in range(ids.shape[0]):
        for t in range(ids.shape[1]):
            tok = int(ids[b, t])
            if not bool(attention_mask[b, t]) or tok in specials:
                continue
            if rng.random() >= rate:
                continue
            r = rng.random()
            if r < 0.8:
                ids[b, t] = vocab.mask_id
                kinds.append("MASK")
            elif r < 0.9:
                ids[b, t] = normal[int(rng.integers(len(normal)))]
                kinds.append("RANDOM")
            else:
                kinds.append("KEEP")
            positions.append((b, t))
            originals.append(tok)
    return ids, MlmBatchMask(positions, originals, kinds)


class MlmHead(nn.Module):
    """Dense + GELU + norm, then logits tied to the token embedding table."""

    def __init__(self, d: int, embedding: nn.Embedding):
        super().__init__()
        self.dense = nn.Linear(d, d)
        self.norm = LayerNorm(d)
        self.embedding = [embedding]  # list keeps it out of this module's parameters
        self.bias = nn.Parameter(torch.zeros(embedding.num_embeddings))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        h = self.norm(F.gelu(self.dense(hidden)))
        return h @ self.embedding[0].weight.T + self.bias


class LossCounters:
    empty_mlm_batches = 0


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not IGNORE."""
    selected = labels != IGNORE
    if not bool(selected.any()):
        LossCounters.empty_mlm_batches += 1
        log.debug("mlm_loss called with no masked positions")
        return logits.sum() * 0
    return F.cross_entropy(logits[selected], labels[selected])


def mlm_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    selected = labels != IGNORE
    if not bool(selected.any()):
        return float("nan")
    return float((logits[selected].argmax(-1) == labels[selected]).float().mean())


# --- image-text matching -----------------------------------------------------

class ItmHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(d, 2)

    def forward(self, cls_vector: torch.Tensor) -> torch.Tensor:
        return self.linear(cls_vector)


def itm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over {mismatch, match}; ``labels`` are booleans."""
    return F.cross_entropy(logits, labels.long())
