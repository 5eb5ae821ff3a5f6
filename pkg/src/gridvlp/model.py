"""Full model: visual trunk, text embeddings, cross-modal encoder, dual-mode decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .decoder import DualModeDecoder, beam_search, greedy_decode
from .encoder import CrossModalEncoder, CrossModalState, ItmHead, MlmHead
from .matching import DetectionSet
from .nn import AttentionConfig, ConfigError, init_weights
from .text import DEFAULT_MAX_LEN, TextEmbedding, TokenSequence, Vocabulary, collate_tokens, tokenize
from .visual import GridFeatureMap, VisualEncoder


@dataclass
class ModelConfig:
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    dropout: float = 0.1
    encoder_layers: int = 6
    decoder_layers: int = 6
    num_queries: int = 16
    num_classes: int = 3
    num_attrs: int = 6
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 48, 64)
    max_text_len: int = DEFAULT_MAX_LEN
    detect_attend_text: bool = True

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        self.attention()  # validates head divisibility
        if self.hidden_size % 4:
            raise ConfigError("hidden_size must be divisible by 4 for 2D positional codes")
        if self.decoder_layers < 1 or self.encoder_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.hidden_size, self.num_heads, self.ffn_size, self.dropout)


# Published architecture sizes; too heavy to train here but constructible.
FULL_MODEL = dict(hidden_size=256, num_heads=8, ffn_size=1024, encoder_layers=6,
                  decoder_layers=6, num_queries=100, stem_width=64,
                  stage_widths=(256, 512, 1024, 2048))


class VLPModel(nn.Module):
    """Named submodules: ``text_embed``, ``visual``, ``encoder``, ``decoder``,
    ``mlm_head``, ``itm_head``. Fine-tuning heads live in :mod:`downstream`."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        att = cfg.attention()
        d = cfg.hidden_size
        self.text_embed = TextEmbedding(len(vocab), d, cfg.max_text_len, dropout=cfg.dropout)
        self.visual = VisualEncoder(d, cfg.stem_width, cfg.stage_widths)
        self.encoder = CrossModalEncoder(att, cfg.encoder_layers)
        self.decoder = DualModeDecoder(att, cfg.decoder_layers, cfg.num_queries, cfg.num_classes,
                                       cfg.num_attrs, len(vocab), cfg.max_text_len,
                                       cfg.detect_attend_text)
        self.mlm_head = MlmHead(d, self.text_embed.token)
        self.itm_head = ItmHead(d)
        init_weights(self)

    # -- encoding --------------------------------------------------------------
    def tokens(self, texts: Sequence[str]) -> dict[str, torch.Tensor]:
        seqs = [tokenize(t, self.vocab, self.cfg.max_text_len) for t in texts]
        return collate_tokens(seqs, self.vocab.pad_id)

    def empty_tokens(self, batch: int) -> dict[str, torch.Tensor]:
        return collate_tokens([TokenSequence([self.vocab.cls_id, self.vocab.sep_id])] * batch,
                              self.vocab.pad_id)

    def encode_features(self, grid: GridFeatureMap, tokens: dict[str, torch.Tensor],
                        **diagnostics) -> CrossModalState:
        text = self.text_embed(tokens["token_ids"], tokens.get("segment_ids"),
                               tokens.get("position_ids"))
        return self.encoder(text, tokens["attention_mask"], grid, **diagnostics)

    def encode(self, images: torch.Tensor, tokens: dict[str, torch.Tensor],
               **diagnostics) -> CrossModalState:
        return self.encode_features(self.visual(images), tokens, **diagnostics)

    def encode_image_only(self, grid: GridFeatureMap) -> CrossModalState:
        """Encoder pass with empty text, the conditioning used for captioning."""
        return self.encode_features(grid, self.empty_tokens(grid.features.shape[0]))

    # -- heads -------------------------------------------------------------------
    def mlm_logits(self, state: CrossModalState) -> torch.Tensor:
        return self.mlm_head(state.text)

    def itm_logits(self, state: CrossModalState) -> torch.Tensor:
        return self.itm_head(state.cls_vector)

    def detect(self, state: CrossModalState, **kw) -> DetectionSet:
        return self.decoder.detect(state, **kw)

    # -- generation --------------------------------------------------------------
    def _step_fn(self, state: CrossModalState):
        def step(ids):
            return self.decoder.caption_step(state, ids)
        return step

    @torch.no_grad()
    def generate(self, images: torch.Tensor, beam: int = 1, alpha: float = 0.9,
                 max_len: Optional[int] = None, greedy: bool = False) -> list[list[int]]:
        max_len = max_len or self.cfg.max_text_len
        state = self.encode_image_only(self.visual(images))
        out = []
        for b in range(images.shape[0]):
            step = self._step_fn(state.select([b]))
            if greedy:
                out.append(greedy_decode(step, self.vocab.bos_id, self.vocab.eos_id, max_len))
            else:
                out.append(beam_search(step, self.vocab.bos_id, self.vocab.eos_id, beam, alpha,
                                       max_len))
        return out

    # -- parameter groups ----------------------------------------------------------
    def private_head_parameters(self) -> dict[str, list[str]]:
        """Parameter names touched by exactly one pre-training loss."""
        names = [n for n, _ in self.named_parameters()]
        det = ("decoder.query_embed", "decoder.class_head", "decoder.attr_head", "decoder.box_head")
        cap = ("decoder.caption_embed", "decoder.caption_pos", "decoder.caption_norm",
               "decoder.caption_head")
        return {
            "mlm": [n for n in names if n.startswith("mlm_head.")],
            "itm": [n for n in names if n.startswith("itm_head.")],
            "detection": [n for n in names if n.startswith(det)],
            "caption": [n for n in names if n.startswith(cap)],
        }

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("visual.backbone.")]

    def config_dict(self) -> dict:
        return asdict(self.cfg)
