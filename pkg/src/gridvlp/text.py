"""Tokenization and sentence embeddings."""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .nn import LayerNorm

PAD, UNK, CLS, SEP, MASK, BOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"
# Order is part of the vocabulary file format: line index == id.
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, BOS, EOS)
DEFAULT_MAX_LEN = 40

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class VocabularyError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocabulary":
        rest = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls(list(SPECIAL_TOKENS) + rest)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])
    cls_id = property(lambda self: self.index[CLS])
    sep_id = property(lambda self: self.index[SEP])
    mask_id = property(lambda self: self.index[MASK])
    bos_id = property(lambda self: self.index[BOS])
    eos_id = property(lambda self: self.index[EOS])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)


def default_vocabulary(extra_words: Iterable[str] = ()) -> Vocabulary:
    """Grammar words plus single-character pieces so any ASCII word segments."""
    from .data import grammar_words

    letters = string.ascii_lowercase + string.digits
    pieces = list(letters) + ["##" + c for c in letters]
    return Vocabulary.build([*grammar_words(), *pieces, *string.punctuation, *extra_words])


@dataclass
class TokenSequence:
    token_ids: list[int]
    segment_ids: list[int] = field(default_factory=list)
    position_ids: list[int] = field(default_factory=list)
    attention_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.token_ids)
        if not self.segment_ids:
            self.segment_ids = [0] * n
        if not self.position_ids:
            self.position_ids = list(range(n))
        if not self.attention_mask:
            self.attention_mask = [True] * n

    def __len__(self) -> int:
        return len(self.token_ids)

    def padded(self, length: int, pad_id: int) -> "TokenSequence":
        extra = length - len(self)
        if extra < 0:
            raise ValueError(f"cannot pad sequence of length {len(self)} to {length}")
        return TokenSequence(
            self.token_ids + [pad_id] * extra,
            self.segment_ids + [0] * extra,
            self.position_ids + [0] * extra,
            self.attention_mask + [False] * extra,
        )


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match segmentation; a word that cannot be covered is [UNK]."""
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize_words(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(p) for w in split_words(text) for p in wordpiece(w, vocab)]


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """``[CLS] pieces… [SEP]`` truncated to ``max_len`` ids in total."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    body = tokenize_words(text, vocab)[: max_len - 2]
    return TokenSequence([vocab.cls_id, *body, vocab.sep_id])


def target_ids(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """Caption decoder target framed as ``[BOS] pieces… [EOS]``."""
    body = tokenize_words(text, vocab)[: max_len - 2]
    return [vocab.bos_id, *body, vocab.eos_id]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    specials = vocab.special_ids
    for i in ids:
        i = int(i)
        if i in specials:
            continue
        tok = vocab.tokens[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)


def collate_tokens(seqs: Sequence[TokenSequence], pad_id: int) -> dict[str, torch.Tensor]:
    length = max(len(s) for s in seqs)
    padded = [s.padded(length, pad_id) for s in seqs]
    return {
        "token_ids": torch.tensor([s.token_ids for s in padded], dtype=torch.long),
        "segment_ids": torch.tensor([s.segment_ids for s in padded], dtype=torch.long),
        "position_ids": torch.tensor([s.position_ids for s in padded], dtype=torch.long),
        "attention_mask": torch.tensor([s.attention_mask for s in padded], dtype=torch.bool),
    }


class TextEmbedding(nn.Module):
    """Token + segment + learned position embeddings, summed and normalized."""

    def __init__(self, vocab_size: int, hidden: int, max_len: int = DEFAULT_MAX_LEN,
                 num_segments: int = 2, dropout: float = 0.1):
        super().__init__()
        self.token = nn.Embedding(vocab_size, hidden)
        self.segment = nn.Embedding(num_segments, hidden)
        self.position = nn.Embedding(max_len, hidden)
        self.norm = LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, token_ids: torch.Tensor, segment_ids: torch.Tensor | None = None,
                position_ids: torch.Tensor | None = None) -> torch.Tensor:
        if token_ids.numel() and (int(token_ids.max()) >= self.token.num_embeddings
                                  or int(token_ids.min()) < 0):
            raise VocabularyError(
                f"token id out of range [0, {self.token.num_embeddings})"
            )
        if segment_ids is None:
            segment_ids = torch.zeros_like(token_ids)
        if position_ids is None:
            position_ids = torch.arange(token_ids.shape[-1]).expand_as(token_ids)
        if token_ids.shape[-1] > self.position.num_embeddings:
            raise VocabularyError(
                f"sequence length {token_ids.shape[-1]} exceeds {self.position.num_embeddings}"
            )
        x = self.token(token_ids) + self.segment(segment_ids) + self.position(position_ids)
        return self.dropout(self.norm(x))
