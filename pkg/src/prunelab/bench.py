"""Efficiency measurements: wall-clock passes and live-byte accounting.

Times are 10-batch sums on a monotonic clock, repeated at least three
times with the compared arms interleaved inside each repetition so clock
drift hits every arm equally.  Memory is not sampled from the OS: it is a
deterministic walk of what training actually holds live, summing weight
bytes, recorded activation nodes, the gradient buffers backward will
materialize, and two adaptive-moment slots per trainable parameter.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import FoundationModel, ModelConfig, LORA_SITES
from .peft import AttachPoint, PeftSet, init_module, site_dims
from .plan import PruningPlan

TIMING_BATCHES = 10
MIN_REPS = 3


@dataclass
class BenchRow:
    label: str
    forward_times: List[float] = field(default_factory=list)
    backward_times: List[float] = field(default_factory=list)
    byte_parts: Dict[str, int] = field(default_factory=dict)
    foundation_params: int = 0
    trainable_params: int = 0

    @property
    def forward_median(self) -> float:
        return statistics.median(self.forward_times)

    @property
    def backward_median(self) -> float:
        return statistics.median(self.backward_times)

    @property
    def total_bytes(self) -> int:
        return sum(self.byte_parts.values())

    def variance_note(self) -> str:
        if len(self.forward_times) < 2:
            return "single rep"
        return (f"fwd spread {max(self.forward_times) - min(self.forward_times):.4f}s "
                f"over {len(self.forward_times)} reps")


def _pass_times(model: FoundationModel, peft: Optional[PeftSet],
                ids: np.ndarray, labels: np.ndarray,
                batches: int = TIMING_BATCHES) -> Tuple[float, float]:
    fwd = 0.0
    bwd = 0.0
    for _ in range(batches):
        t0 = time.perf_counter()
        logits = model.forward(ids, peft=peft)
        t1 = time.perf_counter()
        loss = T.softmax_cross_entropy(logits, labels)
        T.backward(loss)
        t2 = time.perf_counter()
        fwd += t1 - t0
        bwd += t2 - t1
        for p in T.reachable_tensors(loss):
            p.grad = None
    return fwd, bwd


def account_live_bytes(model: FoundationModel, peft: Optional[PeftSet],
                       ids: np.ndarray, labels: np.ndarray) -> Dict[str, int]:
    """Bytes held live at the peak of one training step, by category."""
    params = model.foundation_parameters() + model.trainable_parameters()
    if peft is not None:
        params += peft.parameters()
    weight_bytes = sum(p.data.nbytes for p in params)
    trainable = [p for p in params if p.requires_grad]
    logits = model.forward(ids, peft=peft)
    loss = T.softmax_cross_entropy(logits, labels)
    nodes = T.reachable_tensors(loss)
    act_bytes = sum(n.data.nbytes for n in nodes if n._grad_fn is not None)
    grad_bytes = act_bytes + sum(p.data.nbytes for p in trainable)
    opt_bytes = 2 * sum(p.data.nbytes for p in trainable)
    return {"weights": weight_bytes, "activations": act_bytes,
            "grads": grad_bytes, "optimizer": opt_bytes}


def measure_arms(arms: Sequence[Tuple[str, FoundationModel, Optional[PeftSet]]],
                 ids: np.ndarray, labels: np.ndarray, reps: int = MIN_REPS,
                 batches: int = TIMING_BATCHES) -> List[BenchRow]:
    """Time every arm, interleaved within each repetition."""
    if reps < MIN_REPS:
        raise ContractError(f"need at least {MIN_REPS} repetitions, got {reps}")
    rows = []
    for label, model, peft in arms:
        row = BenchRow(label=label)
        row.byte_parts = account_live_bytes(model, peft, ids, labels)
        counts = model.count_params(peft)
        row.foundation_params = counts["foundation"]
        row.trainable_params = counts["trainable"]
        rows.append(row)
    for _ in range(reps):
        for row, (label, model, peft) in zip(rows, arms):
            fwd, bwd = _pass_times(model, peft, ids, labels, batches)
            row.forward_times.append(fwd)
            row.backward_times.append(bwd)
    return rows


def _bench_batch(config: ModelConfig, batch: int, seq: int, seed: int):
    rng = T.seeded_rng(seed)
    ids = rng.integers(0, config.vocab_size, (batch, seq), dtype=np.int64)
    labels = rng.integers(0, config.num_classes, batch, dtype=np.int64)
    return ids, labels


def attach_sites(model: FoundationModel, sites: Sequence[str], rank: int,
                 scale: float, seed: int) -> PeftSet:
    """Low-rank modules on a chosen subset of sites (bench arms only)."""
    rng = T.seeded_rng(seed)
    modules = {}
    for layer in range(model.config.num_layers):
        for site in sites:
            d_in, d_out = site_dims(model, layer, site)
            modules[(layer, site)] = init_module(
                "lora", AttachPoint(layer, site), d_in, d_out, rank, rng,
                scale=scale, activation=model.config.activation)
    return PeftSet("lora", modules)


def keep_first_plan(config: ModelConfig, heads_kept: int, ffn_kept: int) -> PruningPlan:
    """Synthetic structural plan: keep the first k heads and FFN dims."""
    return PruningPlan(
        keep_heads=[list(range(heads_kept)) for _ in range(config.num_layers)],
        keep_ffn=[list(range(ffn_kept)) for _ in range(config.num_layers)],
        keep_modules=[], keep_ranks={})


def bench_model_size(seed: int = 0, reps: int = MIN_REPS) -> List[BenchRow]:
    """Forward/backward cost versus backbone scale."""
    shapes = [(2, 96), (4, 160), (6, 224)]
    arms = []
    for L, d in shapes:
        cfg = ModelConfig(vocab_size=128, max_seq=48, embed_dim=d, num_layers=L,
                          num_heads=4, ffn_dim=4 * d, num_classes=2)
        model = FoundationModel(cfg, seed=seed)
        peft = attach_sites(model, LORA_SITES, rank=8, scale=2.0, seed=seed + 1)
        arms.append((f"L={L} d={d}", model, peft))
    ids, labels = _bench_batch(arms[0][1].config, batch=8, seq=48, seed=seed + 2)
    return measure_arms(arms, ids, labels, reps=reps)


def bench_rank_sweep(seed: int = 0, reps: int = MIN_REPS) -> List[BenchRow]:
    """Hold the module set fixed, vary the rank."""
    cfg = ModelConfig(vocab_size=128, max_seq=48, embed_dim=192, num_layers=3,
                      num_heads=4, ffn_dim=768, num_classes=2)
    model = FoundationModel(cfg, seed=seed)
    arms = []
    for r in (8, 16, 32):
        peft = attach_sites(model, LORA_SITES, rank=r, scale=2.0, seed=seed + 1)
        arms.append((f"r={r}", model, peft))
    ids, labels = _bench_batch(cfg, batch=8, seq=48, seed=seed + 2)
    return measure_arms(arms, ids, labels, reps=reps)


def bench_module_count(seed: int = 0, reps: int = MIN_REPS) -> List[BenchRow]:
    """Vary attach-site count at a fixed trainable-parameter budget."""
    cfg = ModelConfig(vocab_size=128, max_seq=48, embed_dim=192, num_layers=3,
                      num_heads=4, ffn_dim=768, num_classes=2)
    model = FoundationModel(cfg, seed=seed)
    arms = []
    for sites, r in ((("q",), 32), (("q", "k"), 16), (("q", "k", "v", "o"), 8)):
        peft = attach_sites(model, sites, rank=r, scale=2.0, seed=seed + 1)
        arms.append((f"{len(sites)} sites r={r}", model, peft))
    ids, labels = _bench_batch(cfg, batch=8, seq=48, seed=seed + 2)
    return measure_arms(arms, ids, labels, reps=reps)


def bench_pruned_vs_dense(seed: int = 0, reps: int = MIN_REPS) -> List[BenchRow]:
    """Dense backbone versus a materialized one near half retention."""
    cfg = ModelConfig(vocab_size=256, max_seq=64, embed_dim=256, num_layers=4,
                      num_heads=8, ffn_dim=1024, num_classes=2)
    dense = FoundationModel(cfg, seed=seed)
    plan = keep_first_plan(cfg, heads_kept=4, ffn_kept=512)
    pruned = dense.materialize(plan)
    dense_peft = attach_sites(dense, LORA_SITES, rank=8, scale=2.0, seed=seed + 1)
    pruned_peft = attach_sites(pruned, LORA_SITES, rank=8, scale=2.0, seed=seed + 1)
    ids, labels = _bench_batch(cfg, batch=8, seq=48, seed=seed + 2)
    return measure_arms([("dense", dense, dense_peft),
                         ("pruned", pruned, pruned_peft)], ids, labels, reps=reps)


BENCH_MODES = {
    "model-size": bench_model_size,
    "rank-sweep": bench_rank_sweep,
    "module-count-sweep": bench_module_count,
    "pruned-vs-dense": bench_pruned_vs_dense,
}
