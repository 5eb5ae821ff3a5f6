"""Evaluation of a pre-trained model on its own training scenes."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .data import Scene, SceneConfig
from .encoder import IGNORE, mlm_accuracy
from .metrics import corpus_bleu, evaluate_detections, exact_match_rate
from .model import VLPModel
from .pretrain import scene_images, scene_targets
from .text import collate_tokens, detokenize, tokenize


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield list(range(i, min(n, i + size)))


@torch.no_grad()
def detect_scenes(model: VLPModel, scenes: Sequence[Scene], texts: Optional[Sequence[str]] = None,
                  batch_size: int = 32):
    """Detections conditioned on ``texts`` (captions by default; "" for no text)."""
    model.eval()
    texts = [s.caption for s in scenes] if texts is None else texts
    preds = []
    for idx in _chunks(len(scenes), batch_size):
        images = scene_images([scenes[i] for i in idx])
        state = model.encode(images, model.tokens([texts[i] for i in idx]))
        det = model.detect(state)
        preds.extend(det[k] for k in range(len(idx)))
    return preds


def evaluate_detection(model: VLPModel, scenes: Sequence[Scene],
                       scene_cfg: SceneConfig = SceneConfig(),
                       texts: Optional[Sequence[str]] = None) -> dict:
    preds = detect_scenes(model, scenes, texts)
    gts = [scene_targets(s, scene_cfg) for s in scenes]
    return evaluate_detections(preds, gts, len(scene_cfg.classes), scene_cfg.classes)


@torch.no_grad()
def generate_captions(model: VLPModel, scenes: Sequence[Scene], beam: int = 1,
                      alpha: float = 0.9, greedy: bool = False) -> list[list[int]]:
    model.eval()
    out = []
    for idx in _chunks(len(scenes), 32):
        out.extend(model.generate(scene_images([scenes[i] for i in idx]), beam=beam, alpha=alpha,
                                  greedy=greedy))
    return out


def evaluate_captions(model: VLPModel, scenes: Sequence[Scene], beam: int = 1,
                      alpha: float = 0.9, greedy: bool = False) -> dict:
    ids = generate_captions(model, scenes, beam, alpha, greedy)
    hyps = [detokenize(i, model.vocab) for i in ids]
    refs = [s.caption for s in scenes]
    return {"exact_match": exact_match_rate(hyps, refs), "bleu4": corpus_bleu(hyps, refs),
            "n_exact": sum(h == r for h, r in zip(hyps, refs)), "hypotheses": hyps,
            "token_ids": ids}


@torch.no_grad()
def evaluate_mlm(model: VLPModel, scenes: Sequence[Scene]) -> float:
    """Accuracy when each caption token is replaced by [MASK] in turn."""
    model.eval()
    vocab = model.vocab
    images, seqs, labels = [], [], []
    for k, s in enumerate(scenes):
        seq = tokenize(s.caption, vocab, model.cfg.max_text_len)
        for t in range(1, len(seq) - 1):
            ids = list(seq.token_ids)
            lab = [IGNORE] * len(ids)
            lab[t] = ids[t]
            ids[t] = vocab.mask_id
            seqs.append(type(seq)(ids))
            labels.append(lab)
            images.append(k)
    hits = total = 0
    for idx in _chunks(len(seqs), 64):
        tok = collate_tokens([seqs[i] for i in idx], vocab.pad_id)
        lab = torch.full(tok["token_ids"].shape, IGNORE, dtype=torch.long)
        for r, i in enumerate(idx):
            lab[r, : len(labels[i])] = torch.tensor(labels[i])
        state = model.encode(scene_images([scenes[images[i]] for i in idx]), tok)
        acc = mlm_accuracy(model.mlm_logits(state), lab)
        hits += acc * len(idx)
        total += len(idx)
    return hits / total


@torch.no_grad()
def itm_scores(model: VLPModel, scenes: Sequence[Scene], captions: Sequence[str]) -> np.ndarray:
    """Match probability for every (image, caption) combination: images × captions."""
    model.eval()
    out = np.zeros((len(scenes), len(captions)))
    pairs = [(i, j) for i in range(len(scenes)) for j in range(len(captions))]
    for idx in _chunks(len(pairs), 64):
        sub = [pairs[k] for k in idx]
        state = model.encode(scene_images([scenes[i] for i, _ in sub]),
                             model.tokens([captions[j] for _, j in sub]))
        p = model.itm_logits(state).softmax(-1)[:, 1]
        for (i, j), v in zip(sub, p.tolist()):
            out[i, j] = v
    return out


def evaluate_itm(model: VLPModel, scenes: Sequence[Scene]) -> float:
    """Accuracy over all matched pairs and every mismatched combination."""
    captions = [s.caption for s in scenes]
    probs = itm_scores(model, scenes, captions)
    correct = total = 0
    for i, s in enumerate(scenes):
        for j, c in enumerate(captions):
            if j != i and c == s.caption:
                continue
            label = j == i
            correct += int((probs[i, j] > 0.5) == label)
            total += 1
    return correct / total
