"""A small pre-norm transformer classifier with prunable structure.

The backbone (embeddings, attention, FFN, layer norms) is the frozen
foundation; a mean-pool linear classifier on top is always trainable.
Two hook families thread through the forward pass:

* masks: a per-layer head mask scales each head's attention context, and a
  per-layer FFN mask scales each intermediate dimension.  Both default to
  no-ops when absent.
* peft: an attachment set may add low-rank deltas at the q/k/v/o/fc1/fc2
  projections and residual bottleneck branches after the MHA and FFN
  sub-layers (duck-typed, see peft module).

Attention weights are stored with per-head column blocks (head h owns
columns [h*head_dim, (h+1)*head_dim) of w_q/w_k/w_v and the matching rows
of w_o), so structural head pruning is pure block slicing.  Layers may end
up with different head counts and FFN widths; forward reads the live shape
off the weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, LayoutError
from .plan import PruningPlan
from .tensor import Tensor

LORA_SITES = ("q", "k", "v", "o", "fc1", "fc2")
ADAPTER_SITES = ("mha", "ffn")

INIT_SCALE = 0.02
NEG_INF = -1e30


@dataclass
class ModelConfig:
    vocab_size: int
    max_seq: int
    embed_dim: int
    num_layers: int
    num_heads: int
    ffn_dim: int
    num_classes: int
    causal: bool = False
    activation: str = "gelu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "max_seq", "embed_dim", "num_layers",
                     "num_heads", "ffn_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads != 0:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.activation not in ("relu", "gelu"):
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class HeadLayout:
    """Original indices of surviving heads and FFN dims, per layer."""

    kept_heads: List[List[int]]
    kept_ffn: List[List[int]]

    def head_counts(self) -> List[int]:
        return [len(h) for h in self.kept_heads]

    def ffn_widths(self) -> List[int]:
        return [len(f) for f in self.kept_ffn]


@dataclass
class LayerWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_fc1: Tensor
    w_fc2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def tensors(self) -> List[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.ln1_gain,
                self.ln1_bias, self.w_fc1, self.w_fc2, self.ln2_gain, self.ln2_bias]


def _weight(rng, rows: int, cols: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_SCALE, (rows, cols)))


class FoundationModel:
    """Frozen transformer backbone plus a trainable classifier head."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.layout = HeadLayout(
            kept_heads=[list(range(config.num_heads)) for _ in range(config.num_layers)],
            kept_ffn=[list(range(config.ffn_dim)) for _ in range(config.num_layers)],
        )
        rng = T.seeded_rng(seed)
        d, df = config.embed_dim, config.ffn_dim
        self.tok_emb = _weight(rng, config.vocab_size, d)
        self.pos_emb = _weight(rng, config.max_seq, d)
        self.layers: List[LayerWeights] = []
        for _ in range(config.num_layers):
            self.layers.append(LayerWeights(
                w_q=_weight(rng, d, d),
                w_k=_weight(rng, d, d),
                w_v=_weight(rng, d, d),
                w_o=_weight(rng, d, d),
                ln1_gain=Tensor(np.ones(d)),
                ln1_bias=Tensor(np.zeros(d)),
                w_fc1=_weight(rng, d, df),
                w_fc2=_weight(rng, df, d),
                ln2_gain=Tensor(np.ones(d)),
                ln2_bias=Tensor(np.zeros(d)),
            ))
        self.lnf_gain = Tensor(np.ones(d))
        self.lnf_bias = Tensor(np.zeros(d))
        self.w_cls = _weight(rng, d, config.num_classes)
        self.w_cls.requires_grad = True
        self.frozen = True

    @classmethod
    def _blank(cls, config: ModelConfig, seed: int) -> "FoundationModel":
        obj = cls.__new__(cls)
        obj.config = config
        obj.seed = seed
        obj.layers = []
        obj.frozen = True
        return obj

    # -- parameter access ------------------------------------------------

    def foundation_parameters(self) -> List[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for lw in self.layers:
            out.extend(lw.tensors())
        out.extend([self.lnf_gain, self.lnf_bias])
        return out

    def trainable_parameters(self) -> List[Tensor]:
        return [self.w_cls]

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for p in self.foundation_parameters():
            p.requires_grad = not frozen

    def foundation_checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.foundation_parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def head_count(self, layer: int) -> int:
        return len(self.layout.kept_heads[layer])

    def ffn_width(self, layer: int) -> int:
        return len(self.layout.kept_ffn[layer])

    # -- forward ----------------------------------------------------------

    def mha_forward(self, x: Tensor, layer: int, masks=None, peft=None) -> Tensor:
        cfg = self.config
        lw = self.layers[layer]
        b, s, _ = x.shape
        dh = cfg.head_dim
        nh = lw.w_q.shape[1] // dh

        q = x @ lw.w_q
        k = x @ lw.w_k
        v = x @ lw.w_v
        if peft is not None:
            q = _add_delta(q, peft.delta(layer, "q", x, q))
            k = _add_delta(k, peft.delta(layer, "k", x, k))
            v = _add_delta(v, peft.delta(layer, "v", x, v))

        q4 = q.reshape((b, s, nh, dh)).transpose((0, 2, 1, 3))
        k4 = k.reshape((b, s, nh, dh)).transpose((0, 2, 3, 1))
        v4 = v.reshape((b, s, nh, dh)).transpose((0, 2, 1, 3))
        scores = (q4 @ k4) * (1.0 / np.sqrt(dh))
        if cfg.causal:
            bias = np.triu(np.full((s, s), NEG_INF), k=1)
            scores = scores + Tensor(bias)
        probs = T.softmax(scores, axis=-1)
        ctx = probs @ v4

        if masks is not None and masks.head[layer] is not None:
            m = masks.head[layer]
            if m.shape != (nh,):
                raise LayoutError(
                    f"layer {layer}: head mask length {m.shape} vs {nh} heads"
                )
            ctx = ctx * m.reshape((nh, 1, 1))

        ctx = ctx.transpose((0, 2, 1, 3)).reshape((b, s, nh * dh))
        out = ctx @ lw.w_o
        if peft is not None:
            out = _add_delta(out, peft.delta(layer, "o", ctx, out))
        return out

    def ffn_forward(self, x: Tensor, layer: int, masks=None, peft=None) -> Tensor:
        lw = self.layers[layer]
        a = x @ lw.w_fc1
        if peft is not None:
            a = _add_delta(a, peft.delta(layer, "fc1", x, a))
        z = T.activation(a, self.config.activation)
        if masks is not None and masks.ffn[layer] is not None:
            m = masks.ffn[layer]
            if m.shape != (lw.w_fc1.shape[1],):
                raise LayoutError(
                    f"layer {layer}: FFN mask length {m.shape} vs width {lw.w_fc1.shape[1]}"
                )
            z = z * m
        out = z @ lw.w_fc2
        if peft is not None:
            out = _add_delta(out, peft.delta(layer, "fc2", z, out))
        return out

    def forward(self, ids: np.ndarray, masks=None, peft=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"token ids must be [batch, seq], got {ids.shape}")
        b, s = ids.shape
        if s > self.config.max_seq:
            raise DimensionError(f"sequence length {s} exceeds max_seq {self.config.max_seq}")
        x = T.embedding(self.tok_emb, ids) + T.embedding(self.pos_emb, np.arange(s))
        eps = self.config.ln_eps
        for li, lw in enumerate(self.layers):
            h = T.layer_norm(x, lw.ln1_gain, lw.ln1_bias, eps)
            attn = self.mha_forward(h, li, masks, peft)
            if peft is not None:
                attn = _add_delta(attn, peft.branch(li, "mha", attn))
            x = x + attn
            h = T.layer_norm(x, lw.ln2_gain, lw.ln2_bias, eps)
            ffn = self.ffn_forward(h, li, masks, peft)
            if peft is not None:
                ffn = _add_delta(ffn, peft.branch(li, "ffn", ffn))
            x = x + ffn
        x = T.layer_norm(x, self.lnf_gain, self.lnf_bias, eps)
        pooled = x.mean(axis=1)
        return pooled @ self.w_cls

    # -- structural surgery ------------------------------------------------

    def materialize(self, plan: PruningPlan, masks=None) -> "FoundationModel":
        """Slice away pruned structure, folding kept mask values into weights.

        The result needs no masks at inference: kept head masks are folded
        into the surviving w_o rows and kept FFN masks into the surviving
        w_fc2 rows, so it computes the same function as this model under a
        mask whose dropped entries are exactly zero.
        """
        cfg = self.config
        plan.validate(cfg.num_layers, cfg.num_heads, cfg.ffn_dim)
        dh = cfg.head_dim
        out = FoundationModel._blank(cfg, self.seed)
        out.layout = HeadLayout(
            kept_heads=[sorted(plan.keep_heads[li]) for li in range(cfg.num_layers)],
            kept_ffn=[sorted(plan.keep_ffn[li]) for li in range(cfg.num_layers)],
        )
        out.tok_emb = _clone(self.tok_emb)
        out.pos_emb = _clone(self.pos_emb)
        for li, lw in enumerate(self.layers):
            heads = out.layout.kept_heads[li]
            dims = out.layout.kept_ffn[li]
            cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in heads])
            head_scale = np.ones(len(heads))
            ffn_scale = np.ones(len(dims))
            if masks is not None:
                if masks.head[li] is not None:
                    head_scale = masks.head[li].data[heads]
                if masks.ffn[li] is not None:
                    ffn_scale = masks.ffn[li].data[dims]
            w_o = lw.w_o.data[cols, :] * np.repeat(head_scale, dh)[:, None]
            w_fc2 = lw.w_fc2.data[dims, :] * ffn_scale[:, None]
            out.layers.append(LayerWeights(
                w_q=Tensor(lw.w_q.data[:, cols].copy()),
                w_k=Tensor(lw.w_k.data[:, cols].copy()),
                w_v=Tensor(lw.w_v.data[:, cols].copy()),
                w_o=Tensor(w_o),
                ln1_gain=_clone(lw.ln1_gain),
                ln1_bias=_clone(lw.ln1_bias),
                w_fc1=Tensor(lw.w_fc1.data[:, dims].copy()),
                w_fc2=Tensor(w_fc2),
                ln2_gain=_clone(lw.ln2_gain),
                ln2_bias=_clone(lw.ln2_bias),
            ))
        out.lnf_gain = _clone(self.lnf_gain)
        out.lnf_bias = _clone(self.lnf_bias)
        out.w_cls = _clone(self.w_cls)
        out.w_cls.requires_grad = True
        return out

    # -- accounting ---------------------------------------------------------

    def count_params(self, peft=None, masks=None) -> dict:
        """Exact parameter counts by group.

        foundation covers embeddings, encoder layers, and the final norm;
        trainable sums the PEFT set, the classifier, and (when given) the
        masks, which are trainable only during estimation.
        """
        foundation = sum(p.size for p in self.foundation_parameters())
        peft_n = peft.count_params() if peft is not None else 0
        mask_n = masks.count_params() if masks is not None else 0
        cls_n = self.w_cls.size
        return {
            "foundation": foundation,
            "peft": peft_n,
            "classifier": cls_n,
            "masks": mask_n,
            "trainable": peft_n + cls_n + mask_n,
        }


def _clone(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


def _add_delta(base: Tensor, delta: Optional[Tensor]) -> Tensor:
    return base if delta is None else base + delta


def foundation_param_count(config: ModelConfig,
                           heads_kept: Optional[List[int]] = None,
                           ffn_kept: Optional[List[int]] = None) -> int:
    """Closed-form foundation parameter count, no allocation.

    heads_kept / ffn_kept are per-layer surviving counts; None means dense.
    Matches count_params()["foundation"] exactly, so it doubles as an
    independent oracle for shape arithmetic at sizes too big to build.
    """
    L, d, dh = config.num_layers, config.embed_dim, config.head_dim
    if heads_kept is None:
        heads_kept = [config.num_heads] * L
    if ffn_kept is None:
        ffn_kept = [config.ffn_dim] * L
    total = (config.vocab_size + config.max_seq) * d + 2 * d
    for nh, nf in zip(heads_kept, ffn_kept):
        total += 4 * d * nh * dh   # q, k, v columns + o rows
        total += 2 * d * nf        # fc1 columns + fc2 rows
        total += 4 * d             # two layer-norm affines
    return total
