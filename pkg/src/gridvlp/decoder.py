"""Shared transformer decoder used for set prediction and caption generation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import CrossModalState
from .matching import DetectionSet
from .nn import (AttentionConfig, FeedForward, LayerNorm, MLP, MultiHeadAttention, causal_mask,
                 with_pos)


class GenerationError(ValueError):
    pass


class DecoderLayer(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg)
        self.cross_attn = MultiHeadAttention(cfg)
        self.ffn = FeedForward(cfg)
        # Detection starts from all-zero targets, so norm1 sees a constant row
        # (the self-attention bias); a tiny eps would give ~1/sqrt(eps) gradients.
        self.norm1 = LayerNorm(cfg.hidden_size, eps=1e-5)
        self.norm2 = LayerNorm(cfg.hidden_size, eps=1e-5)
        self.norm3 = LayerNorm(cfg.hidden_size, eps=1e-5)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, tgt, query_pos, memory, memory_pos, self_mask, cross_mask):
        qk = with_pos(tgt, query_pos)
        tgt = self.norm1(tgt + self.dropout(self.self_attn(qk, qk, tgt, self_mask)))
        q = with_pos(tgt, query_pos)
        k = with_pos(memory, memory_pos)
        tgt = self.norm2(tgt + self.dropout(self.cross_attn(q, k, memory, cross_mask)))
        return self.norm3(tgt + self.dropout(self.ffn(tgt)))


@dataclass
class CaptionPrefix:
    ids: list[int]
    log_prob: float = 0.0


class DualModeDecoder(nn.Module):
    """One stack of decoder layers, two input/output pairings.

    Detection: learned query slots, no causal mask, cross-attention over the
    whole encoder sequence (or the image span only when ``detect_attend_text``
    is off). Captioning: token embeddings under a causal mask, cross-attention
    restricted to the image span unless ``attend_text`` is requested.
    """

    def __init__(self, cfg: AttentionConfig, num_layers: int, num_queries: int,
                 num_classes: int, num_attrs: int, vocab_size: int, max_len: int = 40,
                 detect_attend_text: bool = True):
        super().__init__()
        d = cfg.hidden_size
        self.cfg = cfg
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(num_layers))
        self.final_norm = LayerNorm(d)
        self.detect_attend_text = detect_attend_text
        self.max_len = max_len
        # detection-only parameters
        self.query_embed = nn.Embedding(num_queries, d)
        self.class_head = nn.Linear(d, num_classes + 1)
        self.attr_head = nn.Linear(d, num_attrs)
        self.box_head = MLP([d, d, d, 4])
        # caption-only parameters
        self.caption_embed = nn.Embedding(vocab_size, d)
        self.caption_pos = nn.Embedding(max_len, d)
        self.caption_norm = LayerNorm(d)
        self.caption_head = nn.Linear(d, vocab_size)

    @property
    def num_queries(self) -> int:
        return self.query_embed.num_embeddings

    def _run(self, tgt, query_pos, state: CrossModalState, self_mask, cross_mask):
        memory = state.final
        for layer in self.layers:
            tgt = layer(tgt, query_pos, memory, state.pos, self_mask, cross_mask)
        return self.final_norm(tgt)

    def _cross_mask(self, state: CrossModalState, lq: int, attend_text: bool) -> torch.Tensor:
        mask = state.key_mask.clone()
        if not attend_text:
            mask[:, state.text_span] = False
        return mask[:, None, :].expand(-1, lq, -1)

    def detect(self, state: CrossModalState, attend_text: Optional[bool] = None,
               query_order: Optional[torch.Tensor] = None) -> DetectionSet:
        b = state.final.shape[0]
        queries = self.query_embed.weight
        if query_order is not None:
            queries = queries[query_order]
        n, d = queries.shape
        attend = self.detect_attend_text if attend_text is None else attend_text
        tgt = queries.new_zeros(b, n, d)
        qpos = queries.unsqueeze(0).expand(b, n, d)
        self_mask = torch.ones(b, n, n, dtype=torch.bool)
        h = self._run(tgt, qpos, state, self_mask, self._cross_mask(state, n, attend))
        return DetectionSet(self.class_head(h), self.attr_head(h), self.box_head(h).sigmoid())

    def caption_hidden(self, state: CrossModalState, ids: torch.Tensor,
                       pad_mask: Optional[torch.Tensor] = None,
                       attend_text: bool = False) -> torch.Tensor:
        b, t = ids.shape
        if t > self.max_len:
            raise GenerationError(f"caption prefix of length {t} exceeds max length {self.max_len}")
        positions = torch.arange(t)
        x = self.caption_norm(self.caption_embed(ids) + self.caption_pos(positions))
        self_mask = causal_mask(t).unsqueeze(0).expand(b, t, t)
        if pad_mask is not None:
            self_mask = self_mask & pad_mask[:, None, :]
        return self._run(x, None, state, self_mask, self._cross_mask(state, t, attend_text))

    def caption_logits(self, state: CrossModalState, ids: torch.Tensor,
                       pad_mask: Optional[torch.Tensor] = None,
                       attend_text: bool = False) -> torch.Tensor:
        return self.caption_head(self.caption_hidden(state, ids, pad_mask, attend_text))

    def caption_step(self, state: CrossModalState, prefix: Sequence[int] | torch.Tensor,
                     attend_text: bool = False) -> torch.Tensor:
        """Next-token logits (|V|) for a single-sample state and prefix."""
        ids = torch.as_tensor(prefix, dtype=torch.long).reshape(1, -1)
        if ids.shape[1] == 0:
            raise GenerationError("caption prefix must contain at least [BOS]")
        return self.caption_logits(state, ids, attend_text=attend_text)[0, -1]


def caption_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor,
                 smoothing: float = 0.0) -> torch.Tensor:
    """Teacher-forced per-token cross-entropy averaged over unmasked targets.

    With ``smoothing`` ε the target is (1−ε)·one-hot + ε/|V| everywhere.
    """
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if smoothing:
        nll = (1 - smoothing) * nll - smoothing * logp.mean(dim=-1)
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum().clamp(min=1)


def smoothed_entropy(vocab_size: int, smoothing: float) -> float:
    """Lowest attainable per-token loss under label smoothing."""
    if smoothing == 0:
        return 0.0
    hi = 1 - smoothing + smoothing / vocab_size
    lo = smoothing / vocab_size
    return -(hi * math.log(hi) + (vocab_size - 1) * lo * math.log(lo))


# --- decoding ----------------------------------------------------------------

StepFn = Callable[[list[int]], torch.Tensor]


def length_penalty(n: int, alpha: float) -> float:
    return ((5 + n) / 6) ** alpha


def greedy_decode(step: StepFn, bos: int, eos: int, max_len: int) -> list[int]:
    """Argmax rollout; returns ids after [BOS] up to and including [EOS]."""
    ids = [bos]
    while len(ids) < max_len:
        tok = int(torch.argmax(step(ids)))
        ids.append(tok)
        if tok == eos:
            break
    return ids[1:]


@dataclass(order=True)
class _Hyp:
    score: float
    ids: list[int] = field(compare=False)
    log_prob: float = field(compare=False)


def beam_search(step: StepFn, bos: int, eos: int, beam: int = 4, alpha: float = 0.9,
                max_len: int = 40) -> list[int]:
    """Beam search scored by log-prob / ((5+n)/6)^α, n = generated tokens.

    Each step keeps the top ``beam - len(finished)`` expansions: those ending
    in EOS (or reaching ``max_len``) are finalized, the rest stay live, so the
    beam shrinks as hypotheses finish. ``beam=1`` therefore reproduces
    :func:`greedy_decode` exactly. Ties are broken toward the lower token id.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [CaptionPrefix([bos], 0.0)]
    finished: list[_Hyp] = []
    while live:
        slots = beam - len(finished)
        cand = []
        for h in live:
            logp = F.log_softmax(step(h.ids).double(), dim=-1).numpy()
            order = np.argsort(-logp, kind="stable")[:slots]
            for tok in order:
                cand.append((h.log_prob + float(logp[tok]), len(cand), h, int(tok)))
        cand.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for lp, _, h, tok in cand[:slots]:
            ids = h.ids + [tok]
            if tok == eos or len(ids) >= max_len:
                finished.append(_Hyp(lp / length_penalty(len(ids) - 1, alpha), ids, lp))
            else:
                live.append(CaptionPrefix(ids, lp))
    if not finished:
        raise GenerationError("beam search produced no hypothesis")
    best = max(finished, key=lambda h: (h.score, -finished.index(h)))
    return best.ids[1:]
