"""Bipartite matching of predicted and ground-truth objects, and the set loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
NO_OBJECT_WEIGHT = 0.1


class MatchingError(ValueError):
    pass


@dataclass
class DetectionSet:
    """Parallel query outputs; the last class index is the no-object slot."""

    class_logits: torch.Tensor  # [B,] N × (K+1)
    attr_logits: torch.Tensor  # [B,] N × A
    boxes: torch.Tensor  # [B,] N × 4, normalized cx, cy, w, h

    def __getitem__(self, i) -> "DetectionSet":
        return DetectionSet(self.class_logits[i], self.attr_logits[i], self.boxes[i])

    def __len__(self) -> int:
        return self.class_logits.shape[0]


@dataclass
class GroundTruthObjects:
    classes: torch.Tensor  # M, long
    boxes: torch.Tensor  # M × 4
    attributes: Optional[torch.Tensor] = None  # M, long; -1 where unannotated

    def __post_init__(self):
        if self.boxes.dim() != 2 or self.boxes.shape[-1] != 4:
            raise MatchingError(f"boxes must be M×4, got {tuple(self.boxes.shape)}")
        if len(self.classes) != len(self.boxes):
            raise MatchingError("classes and boxes disagree on M")
        if self.attributes is not None and len(self.attributes) != len(self.classes):
            raise MatchingError("attributes and classes disagree on M")
        if len(self.boxes):
            if bool((self.boxes < 0).any() or (self.boxes > 1).any()):
                raise MatchingError("ground-truth boxes must lie in [0, 1]")
            if bool((self.boxes[:, 2:] <= 0).any()):
                raise MatchingError("ground-truth boxes need positive width and height")

    def __len__(self) -> int:
        return len(self.classes)

    def permute(self, order: Sequence[int]) -> "GroundTruthObjects":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        attrs = None if self.attributes is None else self.attributes[idx]
        return GroundTruthObjects(self.classes[idx], self.boxes[idx], attrs)


@dataclass
class Assignment:
    rows: list[int]
    cols: list[int]
    total_cost: float
    optimal_set: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def sigma(self) -> dict[int, int]:
        return dict(zip(self.rows, self.cols))

    def __post_init__(self):
        if len(set(self.cols)) != len(self.cols):
            raise MatchingError("assignment is not injective")


# --- boxes -------------------------------------------------------------------

def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def _giou_xyxy(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9):
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    iou = inter / union.clamp(min=eps)
    hull_lt = torch.minimum(a[..., :2], b[..., :2])
    hull_rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return iou - (hull - union) / hull.clamp(min=eps), iou


def giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of aligned cxcywh boxes (broadcasting over leading dims)."""
    return _giou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))[0]


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _giou_xyxy(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))[1]


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """M×4, N×4 → M×N."""
    return giou(a[:, None, :], b[None, :, :])


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return box_iou(a[:, None, :], b[None, :, :])


# --- assignment --------------------------------------------------------------

def _solve(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian for n ≤ m. Returns (col of each row, u, v)."""
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0, 1:] - u[i0] - v[1:]
            cols = np.nonzero(free[1:] & (cur < minv[1:]))[0] + 1
            minv[cols] = cur[cols - 1]
            way[cols] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _total(cost: np.ndarray, cols: Sequence[int]) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        total += float(cost[i, j])
    return total


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of rows to columns.

    Among equal-cost optima the lexicographically smallest column sequence is
    returned, i.e. row 0 takes the lowest column index it can, then row 1…
    """
    cost = np.asarray(cost.detach().cpu() if torch.is_tensor(cost) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be a matrix, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise MatchingError(f"more ground-truth objects ({m}) than predictions ({n})")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix has non-finite entries")
    if m == 0:
        return Assignment([], [], 0.0)
    cols, u, v = _solve(cost)
    cols = [int(c) for c in cols]
    best = _total(cost, cols)
    # Reduced costs lower-bound the extra cost of forcing an edge; only
    # near-zero ones can belong to another optimum.
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + np.abs(cost).max()) * m
    for i in range(m):
        fixed = cols[:i]
        for j in range(cols[i]):
            if j in fixed or reduced[i, j] > tol:
                continue
            rest_rows = list(range(i + 1, m))
            rest_cols = [c for c in range(n) if c not in fixed and c != j]
            if rest_rows:
                sub, _, _ = _solve(cost[np.ix_(rest_rows, rest_cols)])
                tail = [rest_cols[k] for k in sub]
            else:
                tail = []
            cand = fixed + [j] + tail
            total = _total(cost, cand)
            if total <= best:
                cols, best = cand, total
                break
    return Assignment(list(range(m)), cols, best)


# --- cost and loss -----------------------------------------------------------

def matching_cost(gt: GroundTruthObjects, pred: DetectionSet,
                  l1_weight: float = L1_WEIGHT, giou_weight: float = GIOU_WEIGHT) -> torch.Tensor:
    """M×N cost: −p(class) + λ_L1·‖Δbox‖₁ + λ_giou·(1 − GIoU)."""
    if len(gt) < 1:
        raise MatchingError("matching_cost needs at least one ground-truth object")
    with torch.no_grad():
        prob = pred.class_logits.softmax(-1)
        cost_class = -prob[:, gt.classes].T
        cost_l1 = torch.cdist(gt.boxes.to(pred.boxes.dtype), pred.boxes, p=1)
        cost_giou = 1 - pairwise_giou(gt.boxes.to(pred.boxes.dtype), pred.boxes)
        return cost_class + l1_weight * cost_l1 + giou_weight * cost_giou


def match(gt: GroundTruthObjects, pred: DetectionSet) -> Assignment:
    if len(gt) == 0:
        return Assignment([], [], 0.0)
    return hungarian(matching_cost(gt, pred))


def detection_loss(gts: Sequence[GroundTruthObjects], pred: DetectionSet,
                   assignments: Sequence[Assignment],
                   l1_weight: float = L1_WEIGHT, giou_weight: float = GIOU_WEIGHT,
                   no_object_weight: float = NO_OBJECT_WEIGHT) -> dict[str, torch.Tensor]:
    """Set loss over a batch, normalized by the total number of real objects.

    Matched queries pay class NLL, attribute NLL (where annotated) and the box
    loss; unmatched queries pay ``no_object_weight`` × NLL of the no-object class.
    Assignments are treated as constants.
    """
    if len(gts) != len(pred) or len(assignments) != len(gts):
        raise MatchingError("batch size mismatch between targets, predictions and assignments")
    dtype = pred.boxes.dtype
    n_queries = pred.class_logits.shape[1]
    no_obj = pred.class_logits.shape[2] - 1
    zero = pred.boxes.sum() * 0
    parts = {k: zero for k in ("class", "attr", "l1", "giou", "no_object")}
    total_objects = 0
    for b, (gt, a) in enumerate(zip(gts, assignments)):
        if len(a.rows) != len(gt) or sorted(a.rows) != list(range(len(gt))):
            raise MatchingError(f"assignment for sample {b} does not cover its {len(gt)} objects")
        if any(c >= n_queries for c in a.cols):
            raise MatchingError("assignment refers to a non-existent query")
        total_objects += len(gt)
        logp = F.log_softmax(pred.class_logits[b], -1)
        matched = torch.zeros(n_queries, dtype=torch.bool)
        if len(gt):
            rows = torch.as_tensor(a.rows)
            cols = torch.as_tensor(a.cols)
            matched[cols] = True
            parts["class"] = parts["class"] - logp[cols, gt.classes[rows]].sum()
            if gt.attributes is not None:
                attrs = gt.attributes[rows]
                keep = attrs >= 0
                if bool(keep.any()):
                    alogp = F.log_softmax(pred.attr_logits[b][cols[keep]], -1)
                    parts["attr"] = parts["attr"] - alogp.gather(1, attrs[keep, None]).sum()
            pb = pred.boxes[b][cols]
            tb = gt.boxes[rows].to(dtype)
            parts["l1"] = parts["l1"] + (pb - tb).abs().sum()
            parts["giou"] = parts["giou"] + (1 - giou(pb, tb)).sum()
        if bool((~matched).any()):
            parts["no_object"] = parts["no_object"] - logp[~matched, no_obj].sum()
    norm = max(total_objects, 1)
    out = {
        "class": parts["class"] / norm,
        "attr": parts["attr"] / norm,
        "l1": l1_weight * parts["l1"] / norm,
        "giou": giou_weight * parts["giou"] / norm,
        "no_object": no_object_weight * parts["no_object"] / norm,
    }
    out["total"] = out["class"] + out["attr"] + out["l1"] + out["giou"] + out["no_object"]
    return out
