"""Independent oracles used by the test-suite.

Nothing here imports the matching or autodiff code it is meant to check:
assignments are enumerated exhaustively and gradients are estimated with
central differences on plain function evaluations.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

MAX_BRUTE_FORCE_ROWS = 7


@dataclass
class BruteForceResult:
    cols: tuple[int, ...]
    total_cost: float
    optimal: list[tuple[int, ...]] = field(default_factory=list)


def brute_force_assignment(cost) -> BruteForceResult:
    """Exhaustive minimum over all injective row→column maps.

    ``optimal`` lists every assignment achieving the minimum, in lexicographic
    order; ``cols`` is the first of them.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if m > MAX_BRUTE_FORCE_ROWS:
        raise ValueError(f"refusing to enumerate {m} rows (limit {MAX_BRUTE_FORCE_ROWS})")
    if m > n:
        raise ValueError("more rows than columns")
    perms = np.array(list(itertools.permutations(range(n), m)), dtype=np.int64).reshape(-1, m)
    # Accumulate row by row so totals round exactly like a sequential sum.
    totals = np.zeros(len(perms))
    for i in range(m):
        totals = totals + cost[i, perms[:, i]]
    best = float(totals.min())
    optimal = [tuple(int(c) for c in row) for row in perms[totals == best]]
    return BruteForceResult(optimal[0], best, optimal)


@dataclass
class FiniteDiffResult:
    grad: torch.Tensor
    non_finite: list[int]


def finite_diff_grad(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor,
                     probe: float = 1e-5,
                     coords: Optional[Sequence[int]] = None) -> FiniteDiffResult:
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``param`` (in place probes).

    Only ``coords`` (flat indices) are probed when given; other entries are 0.
    """
    flat = param.data.view(-1)
    grad = torch.zeros_like(flat)
    bad = []
    indices = range(flat.numel()) if coords is None else coords
    with torch.no_grad():
        for k in indices:
            orig = flat[k].item()
            flat[k] = orig + probe
            up = float(loss_fn())
            flat[k] = orig - probe
            down = float(loss_fn())
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                bad.append(int(k))
                continue
            grad[k] = (up - down) / (2 * probe)
    return FiniteDiffResult(grad.view_as(param), bad)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    """‖a − b‖ / max(‖a‖, ‖b‖) over the whole vector."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / denom


def token_count_oracle(height: int, width: int, stride: int = 32) -> int:
    return (-(-height // stride)) * (-(-width // stride))
