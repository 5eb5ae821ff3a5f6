"""Evaluation metrics: detection AP, caption BLEU-4, retrieval recall@k."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .matching import DetectionSet, GroundTruthObjects, match, pairwise_iou

# Normalized-area bins for size-stratified AP.
SIZE_BINS = {"small": (0.0, 0.04), "medium": (0.04, 0.1), "large": (0.1, 1.01)}


@dataclass
class Detection:
    image: int
    label: int
    score: float
    box: torch.Tensor


def detections_from_set(pred: DetectionSet, image: int) -> list[Detection]:
    """Each query yields one detection: best real class and its probability."""
    prob = pred.class_logits.softmax(-1)[:, :-1]
    scores, labels = prob.max(-1)
    return [Detection(image, int(l), float(s), pred.boxes[q].detach())
            for q, (s, l) in enumerate(zip(scores, labels))]


def _area(box: torch.Tensor) -> float:
    return float(box[2] * box[3])


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision/recall curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthObjects], label: int,
             iou_threshold: float, area_range: Optional[tuple[float, float]] = None,
             score_threshold: float = 0.5) -> tuple[float, float, int]:
    """AP, precision at ``score_threshold`` and GT count for one class."""
    lo, hi = area_range or (0.0, math.inf)
    gt_boxes, gt_ignore = {}, {}
    npos = 0
    for i, g in enumerate(gts):
        keep = g.classes == label
        boxes = g.boxes[keep]
        gt_boxes[i] = boxes
        ign = [not (lo <= _area(b) < hi) for b in boxes]
        gt_ignore[i] = ign
        npos += sum(not x for x in ign)
    cand = sorted((d for d in dets if d.label == label), key=lambda d: -d.score)
    used = {i: [False] * len(b) for i, b in gt_boxes.items()}
    tp, fp, scores = [], [], []
    for d in cand:
        boxes = gt_boxes.get(d.image)
        best, best_j = iou_threshold, -1
        if boxes is not None and len(boxes):
            ious = pairwise_iou(d.box[None].to(boxes.dtype), boxes)[0]
            for j, v in enumerate(ious.tolist()):
                if not used[d.image][j] and v >= best:
                    best, best_j = v, j
        if best_j >= 0:
            used[d.image][best_j] = True
            if gt_ignore[d.image][best_j]:
                continue
            tp.append(1)
            fp.append(0)
        else:
            if not (lo <= _area(d.box) < hi):
                continue
            tp.append(0)
            fp.append(1)
        scores.append(d.score)
    if npos == 0:
        return float("nan"), float("nan"), 0
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(fp)
    recall = tp_c / npos
    precision = tp_c / np.maximum(tp_c + fp_c, 1e-12)
    ap = average_precision(recall, precision) if len(tp) else 0.0
    confident = [t for t, s in zip(tp, scores) if s >= score_threshold]
    prec = float(np.mean(confident)) if confident else 0.0
    return ap, prec, npos


def evaluate_detections(preds: Sequence[DetectionSet], gts: Sequence[GroundTruthObjects],
                        num_classes: int, class_names: Optional[Sequence[str]] = None) -> dict:
    dets = [d for i, p in enumerate(preds) for d in detections_from_set(p, i)]
    names = list(class_names or [str(c) for c in range(num_classes)])
    report: dict = {"per_class": {}}
    for thr in (0.5, 0.75):
        aps = []
        for c in range(num_classes):
            ap, prec, n = class_ap(dets, gts, c, thr)
            if n:
                aps.append(ap)
            if thr == 0.5:
                report["per_class"][names[c]] = {"ap50": ap, "precision50": prec, "n_gt": n}
        report[f"ap{int(thr * 100)}"] = float(np.mean(aps)) if aps else float("nan")
    for size, rng in SIZE_BINS.items():
        aps = [class_ap(dets, gts, c, 0.5, rng) for c in range(num_classes)]
        vals = [a for a, _, n in aps if n]
        report[f"ap50_{size}"] = float(np.mean(vals)) if vals else float("nan")
    report["attr_accuracy"] = attribute_accuracy(preds, gts)
    report["n_images"] = len(gts)
    return report


def attribute_accuracy(preds: Sequence[DetectionSet], gts: Sequence[GroundTruthObjects]) -> float:
    """Attribute argmax accuracy over Hungarian-matched annotated objects."""
    hit = total = 0
    for p, g in zip(preds, gts):
        if not len(g) or g.attributes is None:
            continue
        a = match(GroundTruthObjects(g.classes, g.boxes.to(p.boxes.dtype), g.attributes), p)
        for i, j in zip(a.rows, a.cols):
            if int(g.attributes[i]) < 0:
                continue
            total += 1
            hit += int(int(p.attr_logits[j].argmax()) == int(g.attributes[i]))
    return hit / total if total else float("nan")


# --- captions ------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU with one reference per hypothesis and the standard brevity penalty."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if min(matches) == 0 or hyp_len == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def exact_match_rate(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    return sum(h == r for h, r in zip(hypotheses, references)) / max(len(references), 1)


# --- retrieval -----------------------------------------------------------------

def ranks(scores: np.ndarray, positives: Sequence[int]) -> np.ndarray:
    """1-based rank of each row's positive column; tied columns do not push it down."""
    scores = np.asarray(scores)
    out = []
    for i, p in enumerate(positives):
        out.append(1 + int(np.sum(scores[i] > scores[i, p])))
    return np.asarray(out)


def recall_at_k(scores: np.ndarray, positives: Sequence[int], k: int) -> float:
    return float(np.mean(ranks(scores, positives) <= k))
