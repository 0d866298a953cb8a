"""Trainable structure masks and the selection rules that read them.

Each attention head and each FFN intermediate dimension gets one scalar
mask, initialized to exactly 1 so the masked model starts identical to the
unmasked one.  During estimation the masks train jointly with the PEFT
parameters under an L1 penalty that pushes redundant structure toward
zero; selection then drops the smallest-magnitude entries, layer-wise for
heads and globally for FFN dims.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .plan import PruningPlan, drop_count
from .tensor import Tensor


@dataclass
class MaskPenaltyConfig:
    lambda_a: float = 1e-4
    lambda_f: float = 1e-4

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_f < 0:
            raise ContractError("mask penalty weights must be nonnegative")


class MaskSet:
    """Per-layer head and FFN mask vectors, all starting at exactly 1."""

    def __init__(self, head_counts: List[int], ffn_widths: List[int]):
        self.head: List[Optional[Tensor]] = [
            Tensor(np.ones(n), requires_grad=True) for n in head_counts]
        self.ffn: List[Optional[Tensor]] = [
            Tensor(np.ones(n), requires_grad=True) for n in ffn_widths]

    @classmethod
    def for_model(cls, model) -> "MaskSet":
        return cls(model.layout.head_counts(), model.layout.ffn_widths())

    def parameters(self) -> List[Tensor]:
        return [m for m in self.head + self.ffn if m is not None]

    def count_params(self) -> int:
        return sum(m.size for m in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for m in self.parameters():
            m.requires_grad = flag

    def zero_dropped(self, plan: PruningPlan) -> None:
        """Set every mask entry outside the plan's keep sets to exactly 0."""
        for li, m in enumerate(self.head):
            if m is None:
                continue
            keep = np.zeros(m.size, dtype=bool)
            keep[plan.keep_heads[li]] = True
            m.data[~keep] = 0.0
        for li, m in enumerate(self.ffn):
            if m is None:
                continue
            keep = np.zeros(m.size, dtype=bool)
            keep[plan.keep_ffn[li]] = True
            m.data[~keep] = 0.0


def mask_loss(task_loss: Tensor, masks: MaskSet, cfg: MaskPenaltyConfig) -> Tensor:
    """Task loss plus L1 mask penalties summed over every layer's masks."""
    if cfg.lambda_a == 0.0 and cfg.lambda_f == 0.0:
        return task_loss
    total = task_loss
    if cfg.lambda_a > 0.0:
        for m in masks.head:
            if m is not None:
                total = total + T.tsum(T.tabs(m)) * cfg.lambda_a
    if cfg.lambda_f > 0.0:
        for m in masks.ffn:
            if m is not None:
                total = total + T.tsum(T.tabs(m)) * cfg.lambda_f
    return total


def select_heads(masks: MaskSet, rho_a: float) -> List[List[int]]:
    """Per layer, drop the floor(rho_a * n) heads of smallest magnitude.

    Ties fall to the lower head index.  Every layer keeps at least one head.
    """
    if not 0 <= rho_a < 1:
        raise ContractError(f"rho_a must be in [0, 1), got {rho_a}")
    keep: List[List[int]] = []
    for li, m in enumerate(masks.head):
        n = m.size
        k = drop_count(rho_a, n)
        if k >= n:
            raise ContractError(f"layer {li}: rho_a {rho_a} would drop every head")
        order = sorted(range(n), key=lambda i: (abs(m.data[i]), i))
        dropped = set(order[:k])
        keep.append([i for i in range(n) if i not in dropped])
    return keep


def select_ffn_dims(masks: MaskSet, rho_f: float) -> List[List[int]]:
    """Drop the globally smallest floor(rho_f * total) FFN dims by magnitude.

    Ties fall to the lexicographically lower (layer, dim).  A layer that
    the global cut would empty force-keeps its largest entry, with a
    warning, so per-layer keep counts may differ from the exact quota.
    """
    if not 0 <= rho_f < 1:
        raise ContractError(f"rho_f must be in [0, 1), got {rho_f}")
    pool = []
    for li, m in enumerate(masks.ffn):
        for j in range(m.size):
            pool.append((abs(m.data[j]), li, j))
    k = drop_count(rho_f, len(pool))
    pool.sort()
    dropped = {(li, j) for _, li, j in pool[:k]}
    keep: List[List[int]] = []
    for li, m in enumerate(masks.ffn):
        kept = [j for j in range(m.size) if (li, j) not in dropped]
        if not kept:
            best = max(range(m.size), key=lambda j: (abs(m.data[j]), -j))
            warnings.warn(
                f"layer {li}: global FFN cut emptied the layer; "
                f"force-keeping dim {best}")
            kept = [best]
        keep.append(kept)
    return keep
