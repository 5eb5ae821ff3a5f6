"""Fine-tuning heads and protocols for VQA, NLVR, retrieval, captioning and detection.

Every task keeps training the shared backbone/encoder (and decoder where used);
the task-specific heads below are new parameters disjoint from the
pre-training heads.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NlvrExample, Scene, SceneConfig, VqaExample
from .decoder import caption_loss
from .evaluate import detect_scenes, evaluate_detection
from .matching import detection_loss, match
from .model import VLPModel
from .nn import LayerNorm, init_weights
from .pretrain import (OptimConfig, build_optimizer, caption_targets, lr_factor, scene_images,
                       scene_targets, seed_everything)

TASKS = ("vqa", "nlvr", "caption", "retrieval", "detect")
VQA_ANSWER_SET_SIZE = 3129  # size of the shared answer set used on real VQA v2 data


class VqaHead(nn.Module):
    def __init__(self, d: int, num_answers: int):
        super().__init__()
        self.fc1 = nn.Linear(d, 2 * d)
        self.norm = LayerNorm(2 * d)
        self.fc2 = nn.Linear(2 * d, num_answers)
        init_weights(self)

    def forward(self, cls_vector: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.norm(F.gelu(self.fc1(cls_vector))))


class NlvrHead(nn.Module):
    """Binary classifier over the concatenated [CLS] vectors of two passes."""

    def __init__(self, d: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * d, d)
        self.norm = LayerNorm(d)
        self.fc2 = nn.Linear(d, 1)
        init_weights(self)

    def forward(self, cls0: torch.Tensor, cls1: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.norm(F.gelu(self.fc1(torch.cat([cls0, cls1], -1))))).squeeze(-1)


class RetrievalHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(d, 1)
        init_weights(self)

    def forward(self, cls_vector: torch.Tensor) -> torch.Tensor:
        return self.linear(cls_vector).squeeze(-1)


def make_head(task: str, d: int, num_answers: int = 0) -> Optional[nn.Module]:
    if task == "vqa":
        return VqaHead(d, num_answers)
    if task == "nlvr":
        return NlvrHead(d)
    if task == "retrieval":
        return RetrievalHead(d)
    if task in ("caption", "detect"):
        return None  # reuse the decoder's caption / detection heads
    raise ValueError(f"unknown task {task!r}")


# --- forward passes and losses -------------------------------------------------

def vqa_forward(model: VLPModel, head: VqaHead, images: torch.Tensor,
                questions: Sequence[str]) -> torch.Tensor:
    """Answer logits (sigmoid gives the multi-label scores)."""
    state = model.encode(images, model.tokens(questions))
    return head(state.cls_vector)


def vqa_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over answers, averaged over questions."""
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="sum") / logits.shape[0]


def nlvr_forward(model: VLPModel, head: NlvrHead, images0: torch.Tensor, images1: torch.Tensor,
                 statements: Sequence[str]) -> torch.Tensor:
    tokens = model.tokens(statements)
    s0 = model.encode(images0, tokens)
    s1 = model.encode(images1, tokens)
    return head(s0.cls_vector, s1.cls_vector)


def retrieval_score(model: VLPModel, head: RetrievalHead, images: torch.Tensor,
                    captions: Sequence[str]) -> torch.Tensor:
    return head(model.encode(images, model.tokens(captions)).cls_vector)


def ranking_loss(pos: torch.Tensor, neg: torch.Tensor, margin: float = 0.2,
                 sharpness: float = 10.0) -> torch.Tensor:
    """Softplus-smoothed hinge on ``neg - pos + margin``; tends to 0 once the
    margin is comfortably satisfied."""
    return (F.softplus(sharpness * (neg - pos + margin)) / sharpness).mean()


# --- fine-tuning loop ----------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 12
    lr_drop_epochs: tuple[int, ...] = (6, 9)
    batch_size: int = 32
    lr: float = 1e-4
    lr_backbone: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    label_smoothing: float = 0.1
    margin: float = 0.2
    beam: int = 4
    alpha: float = 0.9


def scaled_schedule(epochs: int, base: FinetuneConfig = FinetuneConfig()) -> FinetuneConfig:
    """Stretch the 12-epoch / drops-at-6-and-9 shape to ``epochs`` epochs."""
    drops = tuple(max(1, round(e * epochs / base.epochs)) for e in base.lr_drop_epochs)
    return FinetuneConfig(**{**base.__dict__, "epochs": epochs, "lr_drop_epochs": drops})


def desk_finetune_config(epochs: int = 100, **overrides) -> FinetuneConfig:
    """Desk-scale fine-tuning: the 12-epoch shape stretched to ``epochs`` at lr 5e-4."""
    base = FinetuneConfig(**{"lr": 5e-4, "lr_backbone": 5e-4, **overrides})
    return scaled_schedule(epochs, base)


def _train(model: VLPModel, head: Optional[nn.Module], n_examples: int, cfg: FinetuneConfig,
           batch_loss: Callable[[list[int]], torch.Tensor]) -> list[dict]:
    """Epoch loop shared by every task; returns one log record per step."""
    rng = seed_everything(cfg.seed)
    extra = list(head.parameters()) if head is not None else []
    optimizer = build_optimizer(model, OptimConfig(cfg.lr, cfg.lr_backbone, cfg.weight_decay),
                                extra)
    params = [p for g in optimizer.param_groups for p in g["params"]]
    history = []
    for epoch in range(cfg.epochs):
        f = lr_factor(epoch, cfg.lr_drop_epochs)
        for g in optimizer.param_groups:
            g["lr"] = g["base_lr"] * f
        model.train()
        if head is not None:
            head.train()
        order = rng.permutation(n_examples)
        for start in range(0, n_examples, cfg.batch_size):
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            t0 = time.perf_counter()
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(idx)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip if cfg.grad_clip > 0 else math.inf)
            optimizer.step()
            history.append({"step": len(history) + 1, "epoch": epoch, "loss": float(loss.detach()),
                            "lr": {g["name"]: g["lr"] for g in optimizer.param_groups},
                            "wall_time": time.perf_counter() - t0})
    model.eval()
    if head is not None:
        head.eval()
    return history


def _images(scenes: Sequence[Scene], idx: Sequence[int]) -> torch.Tensor:
    return scene_images([scenes[i] for i in idx])


# VQA ---------------------------------------------------------------------------

def vqa_targets(examples: Sequence[VqaExample], answers: Sequence[str]) -> torch.Tensor:
    t = torch.zeros(len(examples), len(answers))
    for k, ex in enumerate(examples):
        t[k, answers.index(ex.answer)] = 1.0
    return t


def finetune_vqa(model: VLPModel, scenes: Sequence[Scene], examples: Sequence[VqaExample],
                 answers: Sequence[str], cfg: FinetuneConfig = FinetuneConfig()):
    head = VqaHead(model.cfg.hidden_size, len(answers))
    targets = vqa_targets(examples, answers)

    def batch_loss(idx):
        logits = vqa_forward(model, head, _images(scenes, [examples[i].scene_index for i in idx]),
                             [examples[i].question for i in idx])
        return vqa_loss(logits, targets[idx])

    return head, _train(model, head, len(examples), cfg, batch_loss)


@torch.no_grad()
def evaluate_vqa(model: VLPModel, head: VqaHead, scenes: Sequence[Scene],
                 examples: Sequence[VqaExample], answers: Sequence[str]) -> float:
    hits = 0
    for start in range(0, len(examples), 64):
        chunk = examples[start:start + 64]
        logits = vqa_forward(model, head, _images(scenes, [e.scene_index for e in chunk]),
                             [e.question for e in chunk])
        pred = logits.argmax(-1).tolist()
        hits += sum(answers[p] == e.answer for p, e in zip(pred, chunk))
    return hits / len(examples)


# NLVR --------------------------------------------------------------------------

def finetune_nlvr(model: VLPModel, scenes: Sequence[Scene], examples: Sequence[NlvrExample],
                  cfg: FinetuneConfig = FinetuneConfig()):
    head = NlvrHead(model.cfg.hidden_size)
    labels = torch.tensor([float(e.label) for e in examples])

    def batch_loss(idx):
        logits = nlvr_forward(model, head, _images(scenes, [examples[i].left_index for i in idx]),
                              _images(scenes, [examples[i].right_index for i in idx]),
                              [examples[i].statement for i in idx])
        return F.binary_cross_entropy_with_logits(logits, labels[idx])

    return head, _train(model, head, len(examples), cfg, batch_loss)


@torch.no_grad()
def evaluate_nlvr(model: VLPModel, head: NlvrHead, scenes: Sequence[Scene],
                  examples: Sequence[NlvrExample]) -> float:
    hits = 0
    for start in range(0, len(examples), 64):
        chunk = examples[start:start + 64]
        logits = nlvr_forward(model, head, _images(scenes, [e.left_index for e in chunk]),
                              _images(scenes, [e.right_index for e in chunk]),
                              [e.statement for e in chunk])
        hits += sum((l > 0) == e.label for l, e in zip(logits.tolist(), chunk))
    return hits / len(examples)


# Retrieval ---------------------------------------------------------------------

def finetune_retrieval(model: VLPModel, scenes: Sequence[Scene],
                       cfg: FinetuneConfig = FinetuneConfig()):
    """Each sampled positive (image, own caption) is paired with one caption
    negative and one image negative drawn from the other scenes."""
    head = RetrievalHead(model.cfg.hidden_size)
    rng = np.random.default_rng(cfg.seed + 1)
    captions = [s.caption for s in scenes]

    def other(i):
        cands = [j for j in range(len(scenes)) if captions[j] != captions[i]]
        return cands[int(rng.integers(len(cands)))]

    def batch_loss(idx):
        neg_cap = [other(i) for i in idx]
        neg_img = [other(i) for i in idx]
        images = _images(scenes, idx + idx + neg_img)
        texts = ([captions[i] for i in idx] + [captions[j] for j in neg_cap]
                 + [captions[i] for i in idx])
        s = retrieval_score(model, head, images, texts)
        n = len(idx)
        pos, neg_t, neg_i = s[:n], s[n:2 * n], s[2 * n:]
        return ranking_loss(pos, neg_t, cfg.margin) + ranking_loss(pos, neg_i, cfg.margin)

    return head, _train(model, head, len(scenes), cfg, batch_loss)


@torch.no_grad()
def retrieval_matrix(model: VLPModel, head: RetrievalHead, scenes: Sequence[Scene],
                     captions: Sequence[str]) -> np.ndarray:
    """Scores for all images × captions."""
    pairs = [(i, j) for i in range(len(scenes)) for j in range(len(captions))]
    out = np.zeros((len(scenes), len(captions)))
    for start in range(0, len(pairs), 128):
        sub = pairs[start:start + 128]
        s = retrieval_score(model, head, _images(scenes, [i for i, _ in sub]),
                            [captions[j] for _, j in sub])
        for (i, j), v in zip(sub, s.tolist()):
            out[i, j] = v
    return out


def pairwise_ranking_accuracy(scores: np.ndarray, captions: Sequence[str]) -> float:
    """Fraction of (image, foreign caption) pairs scored below the own caption."""
    wins = total = 0
    for i in range(scores.shape[0]):
        for j in range(scores.shape[1]):
            if j == i or captions[j] == captions[i]:
                continue
            total += 1
            wins += int(scores[i, i] > scores[i, j])
    return wins / total


# Captioning --------------------------------------------------------------------

def finetune_caption(model: VLPModel, scenes: Sequence[Scene],
                     cfg: FinetuneConfig = FinetuneConfig()):
    ids, mask = caption_targets([s.caption for s in scenes], model.vocab, model.cfg.max_text_len)

    def batch_loss(idx):
        grid = model.visual(_images(scenes, idx))
        state = model.encode_image_only(grid)
        logits = model.decoder.caption_logits(state, ids[idx, :-1], mask[idx, :-1])
        return caption_loss(logits, ids[idx, 1:], mask[idx, 1:], cfg.label_smoothing)

    return None, _train(model, None, len(scenes), cfg, batch_loss)


# Text-conditioned detection ------------------------------------------------------

def finetune_detect(model: VLPModel, scenes: Sequence[Scene],
                    cfg: FinetuneConfig = FinetuneConfig(),
                    scene_cfg: SceneConfig = SceneConfig()):
    gts = [scene_targets(s, scene_cfg) for s in scenes]

    def batch_loss(idx):
        state = model.encode(_images(scenes, idx), model.tokens([scenes[i].caption for i in idx]))
        det = model.detect(state)
        sub = [gts[i] for i in idx]
        assignments = [match(g, det[k]) for k, g in enumerate(sub)]
        return detection_loss(sub, det, assignments)["total"]

    return None, _train(model, None, len(scenes), cfg, batch_loss)


def detect_with_text(model: VLPModel, scenes: Sequence[Scene],
                     texts: Optional[Sequence[str]] = None,
                     scene_cfg: SceneConfig = SceneConfig()):
    """Detections plus AP report; ``texts`` defaults to each scene's caption."""
    preds = detect_scenes(model, scenes, texts)
    return preds, evaluate_detection(model, scenes, scene_cfg, texts)
