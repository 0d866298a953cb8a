"""Importance accounting for attached modules and their ranks.

Module importance is an output-norm ratio: how large the module's
contribution is relative to the path it rides on, averaged over estimation
batches.  Rank importance is first-order Taylor salience: |grad * weight|
summed over the rank's column of W_down and row of W_up, accumulated after
every backward pass while the weights it refers to are still current.

Both feed global selectors that drop the lowest-scoring fraction, with
deterministic tie-breaking in attachment order.
"""

from __future__ import annotations

import warnings
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError
from .peft import PeftModule, PeftSet
from .plan import drop_count
from .tensor import Tensor

NORM_GUARD = 1e-12

ModuleKey = Tuple[int, str]


def module_importance_lora(x_batch, module: PeftModule, frozen_w) -> float:
    """Norm of the scaled low-rank delta over the norm of the frozen path.

    Both norms flatten every batch and sequence position together.
    """
    x = x_batch.data if isinstance(x_batch, Tensor) else np.asarray(x_batch)
    w = frozen_w.data if isinstance(frozen_w, Tensor) else np.asarray(frozen_w)
    delta = (x @ module.w_down.data @ module.w_up.data) * module.scale
    num = float(np.linalg.norm(delta))
    den = max(float(np.linalg.norm(x @ w)), NORM_GUARD)
    return num / den


def module_importance_adapter(h_batch, module: PeftModule) -> float:
    """Norm of the bottleneck branch over the norm of its input."""
    h = h_batch.data if isinstance(h_batch, Tensor) else np.asarray(h_batch)
    with T.no_grad():
        branch = T.activation(Tensor(h @ module.w_down.data), module.activation)
    num = float(np.linalg.norm(branch.data @ module.w_up.data))
    den = max(float(np.linalg.norm(h)), NORM_GUARD)
    return num / den


def rank_param_importance(module: PeftModule) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise |grad * weight| for W_down and W_up; needs fresh grads."""
    if module.w_down.grad is None or module.w_up.grad is None:
        raise ContractError(
            f"module {module.attach}: no gradients recorded this step")
    down = np.abs(module.w_down.grad * module.w_down.data)
    up = np.abs(module.w_up.grad * module.w_up.data)
    return down, up


def rank_importance(module: PeftModule) -> np.ndarray:
    """Per-rank salience: column sum of W_down scores plus row sum of W_up."""
    down, up = rank_param_importance(module)
    return down.sum(axis=0) + up.sum(axis=1)


class ImportanceLedger:
    """Running module-importance means and accumulated per-rank scores."""

    def __init__(self, peft_set: PeftSet):
        self.module_mean: Dict[ModuleKey, float] = {}
        self.module_count: Dict[ModuleKey, int] = {}
        self.rank_scores: Dict[ModuleKey, np.ndarray] = {}
        self.rank_ids: Dict[ModuleKey, List[int]] = {}
        self.steps_observed = 0
        for key, m in peft_set.modules.items():
            self.module_mean[key] = 0.0
            self.module_count[key] = 0
            self.rank_scores[key] = np.zeros(len(m.active_ranks))
            self.rank_ids[key] = list(m.active_ranks)

    def record_module(self, key: ModuleKey, value: float) -> None:
        if key not in self.module_mean:
            raise ContractError(f"importance recorded for unattached module {key}")
        self.module_count[key] += 1
        n = self.module_count[key]
        self.module_mean[key] += (value - self.module_mean[key]) / n

    def accumulate_ranks(self, peft_set: PeftSet) -> None:
        """Call after backward, before the optimizer step."""
        for key, m in peft_set.modules.items():
            self.rank_scores[key] += rank_importance(m)
        self.steps_observed += 1

    def keys(self) -> List[ModuleKey]:
        return list(self.module_mean.keys())

    def dump_rows(self) -> List[Tuple]:
        """Tabular view: (layer, site, mean importance, per-rank scores)."""
        rows = []
        for key in self.keys():
            layer, site = key
            rows.append((layer, site, self.module_mean[key],
                         self.rank_scores[key].tolist()))
        return rows


def select_modules(ledger: ImportanceLedger, rho_m: float) -> List[ModuleKey]:
    """Drop the floor(rho_m * count) modules of smallest mean importance.

    Ties fall to the earlier attachment position, so with an untrained
    ledger (all zeros) the first modules in attachment order are dropped.
    """
    if not 0 <= rho_m < 1:
        raise ContractError(f"rho_m must be in [0, 1), got {rho_m}")
    keys = ledger.keys()
    k = drop_count(rho_m, len(keys))
    order = sorted(range(len(keys)), key=lambda i: (ledger.module_mean[keys[i]], i))
    dropped = set(order[:k])
    return [keys[i] for i in range(len(keys)) if i not in dropped]


def select_ranks(ledger: ImportanceLedger, kept_modules: List[ModuleKey],
                 rho_r: float) -> Dict[ModuleKey, List[int]]:
    """Pool every surviving module's ranks; drop the lowest-scoring fraction.

    A surviving module that would lose all its ranks force-keeps its
    highest-scoring one (warning emitted), so no kept module goes empty.
    """
    if not 0 <= rho_r < 1:
        raise ContractError(f"rho_r must be in [0, 1), got {rho_r}")
    pool = []
    for pos, key in enumerate(kept_modules):
        for slot, rid in enumerate(ledger.rank_ids[key]):
            pool.append((ledger.rank_scores[key][slot], pos, rid))
    k = drop_count(rho_r, len(pool))
    pool.sort()
    dropped = {(pos, rid) for _, pos, rid in pool[:k]}
    keep: Dict[ModuleKey, List[int]] = {}
    for pos, key in enumerate(kept_modules):
        kept = [rid for rid in ledger.rank_ids[key] if (pos, rid) not in dropped]
        if not kept:
            scores = ledger.rank_scores[key]
            ids = ledger.rank_ids[key]
            best = max(range(len(ids)), key=lambda s: (scores[s], -ids[s]))
            warnings.warn(
                f"module {key}: global rank cut emptied it; "
                f"force-keeping rank {ids[best]}")
            kept = [ids[best]]
        keep[key] = kept
    return keep
