"""Trainable low-rank modules attached to the frozen backbone.

Two kinds share one parameter shape (W_down [d_in x r], W_up [r x d_out]):

* lora: a parallel delta ``s * x @ W_down @ W_up`` added to a frozen
  projection's output, one per (layer, site) over q/k/v/o/fc1/fc2.
* adapter: a residual bottleneck ``h + f(h @ W_down) @ W_up`` applied to a
  sub-layer output, one per (layer, site) over mha/ffn.

W_up starts at zero, so a freshly attached set leaves the model's function
untouched and every module's output-norm importance starts at exactly 0.
The scale s stays fixed for the life of a module, rank pruning included.

A PeftSet is the model-facing container: the forward pass calls its
``delta``/``branch`` hooks, and during estimation the set mirrors each
hook's output-norm ratio into an importance ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, LayoutError
from .model import ADAPTER_SITES, LORA_SITES, FoundationModel
from .plan import PruningPlan
from .tensor import Tensor

NORM_GUARD = 1e-12
DEFAULT_SCALE = 2.0


@dataclass(frozen=True)
class AttachPoint:
    layer: int
    site: str


@dataclass
class PeftModule:
    kind: str
    attach: AttachPoint
    w_down: Tensor
    w_up: Tensor
    rank: int
    scale: float = DEFAULT_SCALE
    activation: str = "relu"
    active_ranks: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("lora", "adapter"):
            raise ContractError(f"unknown module kind {self.kind!r}")
        if self.rank < 1:
            raise ContractError("rank must be >= 1")
        if not self.active_ranks:
            self.active_ranks = list(range(self.rank))

    def parameters(self) -> List[Tensor]:
        return [self.w_down, self.w_up]

    def count_params(self) -> int:
        return self.w_down.size + self.w_up.size


def init_module(kind: str, attach: AttachPoint, d_in: int, d_out: int, rank: int,
                rng, scale: float = DEFAULT_SCALE, activation: str = "relu") -> PeftModule:
    """W_down small uniform, W_up zero: the delta starts exactly at zero."""
    bound = 1.0 / np.sqrt(d_in)
    w_down = Tensor(rng.uniform(-bound, bound, (d_in, rank)), requires_grad=True)
    w_up = Tensor(np.zeros((rank, d_out)), requires_grad=True)
    return PeftModule(kind=kind, attach=attach, w_down=w_down, w_up=w_up,
                      rank=rank, scale=scale, activation=activation)


def lora_delta(x: Tensor, m: PeftModule) -> Tensor:
    if m.kind != "lora":
        raise ContractError("lora_delta called on a non-lora module")
    return ((x @ m.w_down) @ m.w_up) * m.scale


def adapter_branch(h: Tensor, m: PeftModule) -> Tensor:
    if m.kind != "adapter":
        raise ContractError("adapter_branch called on a non-adapter module")
    return T.activation(h @ m.w_down, m.activation) @ m.w_up


def adapter_apply(h: Tensor, m: PeftModule) -> Tensor:
    return h + adapter_branch(h, m)


def shrink_ranks(m: PeftModule, keep: List[int]) -> PeftModule:
    """Delete all ranks outside ``keep`` (given as original rank ids).

    The shrunk module computes exactly what the old one would with those
    ranks' factor entries zeroed.
    """
    if not keep:
        raise ContractError(
            f"module {m.attach}: rank pruning left nothing; remove the module instead"
        )
    current = m.active_ranks
    if not set(keep) <= set(current):
        raise ContractError(f"module {m.attach}: keep set {keep} not within active ranks")
    keep_sorted = sorted(keep)
    pos = [current.index(k) for k in keep_sorted]
    return PeftModule(
        kind=m.kind,
        attach=m.attach,
        w_down=Tensor(m.w_down.data[:, pos].copy(), requires_grad=True),
        w_up=Tensor(m.w_up.data[pos, :].copy(), requires_grad=True),
        rank=m.rank,
        scale=m.scale,
        activation=m.activation,
        active_ranks=keep_sorted,
    )


class PeftSet:
    """Ordered collection of modules of one kind, plus the model-facing hooks."""

    def __init__(self, kind: str, modules: Dict[Tuple[int, str], PeftModule]):
        self.kind = kind
        self.modules = dict(modules)
        self._ledger = None

    def keys(self) -> List[Tuple[int, str]]:
        return list(self.modules.keys())

    def parameters(self) -> List[Tensor]:
        out: List[Tensor] = []
        for m in self.modules.values():
            out.extend(m.parameters())
        return out

    def count_params(self) -> int:
        return sum(m.count_params() for m in self.modules.values())

    def observe_into(self, ledger) -> None:
        """Mirror every hook call's importance ratio into ``ledger`` (None stops)."""
        self._ledger = ledger

    # -- hooks called by the model's forward pass -------------------------

    def delta(self, layer: int, site: str, x: Tensor,
              frozen: Optional[Tensor] = None) -> Optional[Tensor]:
        if self.kind != "lora":
            return None
        m = self.modules.get((layer, site))
        if m is None:
            return None
        d = lora_delta(x, m)
        if self._ledger is not None and frozen is not None:
            num = float(np.linalg.norm(d.data))
            den = max(float(np.linalg.norm(frozen.data)), NORM_GUARD)
            self._ledger.record_module((layer, site), num / den)
        return d

    def branch(self, layer: int, site: str, h: Tensor) -> Optional[Tensor]:
        if self.kind != "adapter":
            return None
        m = self.modules.get((layer, site))
        if m is None:
            return None
        b = adapter_branch(h, m)
        if self._ledger is not None:
            num = float(np.linalg.norm(b.data))
            den = max(float(np.linalg.norm(h.data)), NORM_GUARD)
            self._ledger.record_module((layer, site), num / den)
        return b

    # -- pruning-time surgery ----------------------------------------------

    def keep_modules(self, kept_keys: List[Tuple[int, str]]) -> None:
        kept = set(kept_keys)
        unknown = kept - set(self.modules.keys())
        if unknown:
            raise ContractError(f"keep set names unattached modules: {sorted(unknown)}")
        self.modules = {k: v for k, v in self.modules.items() if k in kept}

    def shrink_all(self, keep_ranks: Dict[Tuple[int, str], List[int]]) -> None:
        for key, keep in keep_ranks.items():
            if key not in self.modules:
                raise ContractError(f"rank keep set for unattached module {key}")
            self.modules[key] = shrink_ranks(self.modules[key], keep)

    def restart_deltas(self) -> None:
        """Zero every up-projection so each module contributes nothing again.

        After backbone surgery the sliced-and-rescaled up-projections no
        longer implement the function they were trained as, and resuming
        from them shifts every feature the task head has latched onto.
        Zeroing W_up puts the assembly exactly back on the pruned backbone's
        function; the down-projections keep their learned input directions.
        """
        for m in self.modules.values():
            m.w_up.data[:] = 0.0

    def reslice_for_plan(self, plan: PruningPlan, masks, head_dim: int) -> None:
        """Match module shapes to a materialized backbone, folding kept masks.

        q/k/v modules lose W_up columns of dropped heads; o modules lose the
        matching W_down rows (scaled by the kept head masks, mirroring the
        fold into w_o); fc1 modules lose W_up columns of dropped FFN dims;
        fc2 modules lose the matching W_down rows (scaled by the kept FFN
        masks).  Adapters operate on the residual width and are untouched.
        """
        if self.kind != "lora":
            return
        for (layer, site), m in list(self.modules.items()):
            heads = sorted(plan.keep_heads[layer])
            dims = sorted(plan.keep_ffn[layer])
            cols = np.concatenate(
                [np.arange(h * head_dim, (h + 1) * head_dim) for h in heads])
            head_scale = np.ones(len(heads))
            ffn_scale = np.ones(len(dims))
            if masks is not None:
                if masks.head[layer] is not None:
                    head_scale = masks.head[layer].data[heads]
                if masks.ffn[layer] is not None:
                    ffn_scale = masks.ffn[layer].data[dims]
            if site in ("q", "k", "v"):
                w_up = m.w_up.data[:, cols].copy()
                m.w_up = Tensor(w_up, requires_grad=True)
            elif site == "o":
                w_down = m.w_down.data[cols, :] * np.repeat(head_scale, head_dim)[:, None]
                m.w_down = Tensor(w_down, requires_grad=True)
            elif site == "fc1":
                w_up = m.w_up.data[:, dims].copy()
                m.w_up = Tensor(w_up, requires_grad=True)
            elif site == "fc2":
                w_down = m.w_down.data[dims, :] * ffn_scale[:, None]
                m.w_down = Tensor(w_down, requires_grad=True)


def site_dims(model: FoundationModel, layer: int, site: str) -> Tuple[int, int]:
    d = model.config.embed_dim
    lw = model.layers[layer]
    if site in ("q", "k", "v"):
        return d, lw.w_q.shape[1]
    if site == "o":
        return lw.w_o.shape[0], d
    if site == "fc1":
        return d, lw.w_fc1.shape[1]
    if site == "fc2":
        return lw.w_fc2.shape[0], d
    if site in ADAPTER_SITES:
        return d, d
    raise LayoutError(f"unknown attach site {site!r}")


def attach_estimation_set(model: FoundationModel, kind: str, rank: int,
                          scale: float = DEFAULT_SCALE, seed: int = 0) -> PeftSet:
    """One module per (layer, site), ordered by layer then site position."""
    if kind == "lora":
        sites = LORA_SITES
    elif kind == "adapter":
        sites = ADAPTER_SITES
    else:
        raise ContractError(f"unknown module kind {kind!r}")
    rng = T.seeded_rng(seed)
    modules: Dict[Tuple[int, str], PeftModule] = {}
    for layer in range(model.config.num_layers):
        for site in sites:
            d_in, d_out = site_dims(model, layer, site)
            modules[(layer, site)] = init_module(
                kind, AttachPoint(layer, site), d_in, d_out, rank, rng,
                scale=scale, activation=model.config.activation)
    return PeftSet(kind, modules)
