"""Structural pruning plans.

A plan is a pure description of what survives: which attention heads per
layer, which FFN intermediate dims per layer, which low-rank modules, and
how many ranks each surviving module keeps.  Producing a plan (selection)
and applying it (materialization, re-slicing) are kept separate so that
either side can be tested against the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple


def drop_count(rate: float, n: int) -> int:
    """floor(rate * n), nudged so decimal-entered thirds do not lose a unit.

    floor(0.3333333333333333 * 98304) is 32767 in IEEE double; the epsilon
    restores the intended 32768 while leaving exact products untouched.
    """
    return int(math.floor(rate * n + 1e-9))


@dataclass
class PruningPlan:
    """Per-layer keep lists for the frozen backbone plus module/rank survivals."""

    keep_heads: List[List[int]]
    keep_ffn: List[List[int]]
    keep_modules: List[Tuple[int, str]]
    keep_ranks: Dict[Tuple[int, str], List[int]] = field(default_factory=dict)

    def validate(self, num_layers: int, num_heads: int, ffn_dim: int) -> None:
        from .errors import ContractError

        if len(self.keep_heads) != num_layers or len(self.keep_ffn) != num_layers:
            raise ContractError(
                f"plan covers {len(self.keep_heads)} layers, model has {num_layers}"
            )
        for li in range(num_layers):
            heads = self.keep_heads[li]
            if not heads:
                raise ContractError(f"layer {li}: every layer must keep at least one head")
            if sorted(set(heads)) != sorted(heads):
                raise ContractError(f"layer {li}: duplicate head indices in plan")
            if any(h < 0 or h >= num_heads for h in heads):
                raise ContractError(f"layer {li}: head index out of range")
            dims = self.keep_ffn[li]
            if not dims:
                raise ContractError(f"layer {li}: every layer must keep at least one FFN dim")
            if sorted(set(dims)) != sorted(dims):
                raise ContractError(f"layer {li}: duplicate FFN dims in plan")
            if any(d < 0 or d >= ffn_dim for d in dims):
                raise ContractError(f"layer {li}: FFN dim out of range")
        for key, ranks in self.keep_ranks.items():
            if key not in set(self.keep_modules):
                raise ContractError(f"rank keep set given for pruned module {key}")
            if not ranks:
                raise ContractError(f"module {key}: must keep at least one rank")
            if sorted(set(ranks)) != list(ranks) or min(ranks) < 0:
                raise ContractError(f"module {key}: rank indices must be unique, "
                                    "sorted, and nonnegative")


def identity_plan(num_layers: int, num_heads: int, ffn_dim: int,
                  module_keys: List[Tuple[int, str]], rank: int) -> PruningPlan:
    """The plan that keeps everything."""
    return PruningPlan(
        keep_heads=[list(range(num_heads)) for _ in range(num_layers)],
        keep_ffn=[list(range(ffn_dim)) for _ in range(num_layers)],
        keep_modules=list(module_keys),
        keep_ranks={k: list(range(rank)) for k in module_keys},
    )
