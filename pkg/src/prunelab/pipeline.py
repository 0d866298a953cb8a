"""Lifecycle orchestration: estimate, prune once, fine-tune, evaluate.

The estimation phase trains masks and freshly attached modules jointly for
a small slice of the step budget while the importance ledger watches.
Pruning is one-shot: keep-sets are selected, mask zeros become physical
structure, surviving modules are re-sliced to fit.  Their up-projections
then restart at zero so fine-tuning resumes from exactly the pruned
backbone's function, with the learned down-projections kept as warm input
directions.  The remaining budget fine-tunes the pruned assembly on the
plain task loss.  The frozen backbone is checksummed around every phase.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .config import RunConfig, TrainConfig
from .data import Dataset, TaskSpec, batch_stream, eval_batches, generate
from .errors import ContractError, DataError
from .importance import ImportanceLedger, select_modules, select_ranks
from .masks import MaskPenaltyConfig, MaskSet, mask_loss, select_ffn_dims, select_heads
from .model import FoundationModel
from .optim import AdamW, WarmupSchedule
from .peft import PeftSet, attach_estimation_set
from .plan import PruningPlan

TIE_BREAK_WARNING = "estimation skipped; tie-break selection"


@dataclass
class RunReport:
    est_losses: List[float]
    ft_losses: List[float]
    accuracy: float
    counts_before: Dict[str, int]
    counts_after: Dict[str, int]
    phase_seconds: Dict[str, float]
    plan: PruningPlan
    config_lines: List[str]
    notes: List[str] = field(default_factory=list)

    @property
    def foundation_retention(self) -> float:
        return self.counts_after["foundation"] / self.counts_before["foundation"]


@dataclass
class RunArtifacts:
    model: FoundationModel
    peft: PeftSet
    masks: MaskSet
    plan: PruningPlan
    train_ds: Dataset
    eval_ds: Dataset


def _make_optimizer(params, cfg: TrainConfig, lr: float) -> AdamW:
    return AdamW(params, lr=lr, betas=(cfg.beta1, cfg.beta2),
                 eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _require_batchable(ds: Dataset, batch_size: int) -> None:
    if len(ds) < batch_size:
        raise DataError(
            f"dataset of {len(ds)} examples is smaller than one batch ({batch_size})")


def estimate(model: FoundationModel, peft_set: PeftSet, masks: MaskSet,
             train_ds: Dataset, cfg: TrainConfig,
             stream: Optional[Iterator] = None) -> Tuple[ImportanceLedger, List[float]]:
    """Joint mask + module training for the first slice of the budget.

    Records module importance per batch (via the forward hooks) and rank
    importance after each backward, while grads still match the weights.
    """
    _require_batchable(train_ds, cfg.batch_size)
    if stream is None:
        stream = batch_stream(train_ds, cfg.batch_size, cfg.seed + 3)
    ledger = ImportanceLedger(peft_set)
    losses: List[float] = []
    if cfg.estimation_steps == 0:
        return ledger, losses
    params = peft_set.parameters() + masks.parameters() + model.trainable_parameters()
    opt = _make_optimizer(params, cfg, cfg.lr_estimation)
    sched = WarmupSchedule(cfg.lr_estimation, cfg.estimation_steps, cfg.warmup_frac)
    penalty = MaskPenaltyConfig(cfg.lambda_a, cfg.lambda_f)
    peft_set.observe_into(ledger)
    try:
        for step in range(cfg.estimation_steps):
            ids, labels = next(stream)
            logits = model.forward(ids, masks=masks, peft=peft_set)
            task_loss = T.softmax_cross_entropy(logits, labels)
            loss = mask_loss(task_loss, masks, penalty)
            opt.zero_grad()
            T.backward(loss)
            ledger.accumulate_ranks(peft_set)
            opt.set_lr(sched.lr_at(step))
            opt.step()
            losses.append(float(task_loss.data))
    finally:
        peft_set.observe_into(None)
    return ledger, losses


def prune_all(model: FoundationModel, peft_set: PeftSet, masks: MaskSet,
              ledger: ImportanceLedger, cfg: TrainConfig
              ) -> Tuple[FoundationModel, PeftSet, PruningPlan]:
    """Select keep-sets, materialize the backbone, re-slice the modules."""
    if ledger.steps_observed == 0 and (cfg.rho_a or cfg.rho_f or cfg.rho_m or cfg.rho_r):
        warnings.warn(TIE_BREAK_WARNING)
    keep_heads = select_heads(masks, cfg.rho_a)
    keep_ffn = select_ffn_dims(masks, cfg.rho_f)
    kept_modules = select_modules(ledger, cfg.rho_m)
    keep_ranks = select_ranks(ledger, kept_modules, cfg.rho_r)
    plan = PruningPlan(keep_heads=keep_heads, keep_ffn=keep_ffn,
                       keep_modules=kept_modules,
                       keep_ranks={k: sorted(v) for k, v in keep_ranks.items()})
    masks.zero_dropped(plan)
    pruned = model.materialize(plan, masks)
    peft_set.keep_modules(kept_modules)
    peft_set.reslice_for_plan(plan, masks, model.config.head_dim)
    peft_set.shrink_all(keep_ranks)
    masks.set_trainable(False)
    return pruned, peft_set, plan


def finetune(model: FoundationModel, peft_set: PeftSet, train_ds: Dataset,
             cfg: TrainConfig, steps: Optional[int] = None,
             stream: Optional[Iterator] = None) -> List[float]:
    """Plain task-loss training of surviving modules plus the classifier."""
    _require_batchable(train_ds, cfg.batch_size)
    if steps is None:
        steps = cfg.total_steps - cfg.estimation_steps
    if steps == 0:
        return []
    if stream is None:
        stream = batch_stream(train_ds, cfg.batch_size, cfg.seed + 3)
    params = peft_set.parameters() + model.trainable_parameters()
    opt = _make_optimizer(params, cfg, cfg.lr_finetune)
    sched = WarmupSchedule(cfg.lr_finetune, steps, cfg.warmup_frac)
    losses: List[float] = []
    for step in range(steps):
        ids, labels = next(stream)
        logits = model.forward(ids, peft=peft_set)
        loss = T.softmax_cross_entropy(logits, labels)
        opt.zero_grad()
        T.backward(loss)
        opt.set_lr(sched.lr_at(step))
        opt.step()
        losses.append(float(loss.data))
    return losses


def evaluate(model: FoundationModel, ds: Dataset, batch_size: int = 64,
             peft: Optional[PeftSet] = None) -> float:
    """Argmax accuracy over the whole split, fixed order, no grads."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    hits = 0
    with T.no_grad():
        for ids, labels in eval_batches(ds, batch_size):
            logits = model.forward(ids, peft=peft)
            hits += int((np.argmax(logits.data, axis=1) == labels).sum())
    return hits / len(ds)


def run_all(rc: RunConfig) -> Tuple[RunReport, RunArtifacts]:
    """The full lifecycle on one task; deterministic in (config, seed)."""
    cfg = rc.train
    notes: List[str] = []
    timer: Dict[str, float] = {}

    t0 = time.perf_counter()
    model = FoundationModel(rc.model, seed=cfg.seed)
    train_ds, eval_ds = generate(rc.task)
    peft = attach_estimation_set(model, cfg.peft_kind, cfg.rank,
                                 cfg.lora_scale, seed=cfg.seed + 1)
    masks = MaskSet.for_model(model)
    counts_before = model.count_params(peft, masks)
    timer["setup"] = time.perf_counter() - t0

    base_sum = model.foundation_checksum()
    stream = batch_stream(train_ds, cfg.batch_size, cfg.seed + 3)

    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ledger, est_losses = estimate(model, peft, masks, train_ds, cfg, stream)
        timer["estimate"] = time.perf_counter() - t0
        if model.foundation_checksum() != base_sum:
            raise ContractError("frozen foundation weights changed during estimation")

        t0 = time.perf_counter()
        pruned, peft, plan = prune_all(model, peft, masks, ledger, cfg)
        timer["prune"] = time.perf_counter() - t0
    notes.extend(str(w.message) for w in caught)

    counts_after = pruned.count_params(peft)
    pruned_sum = pruned.foundation_checksum()
    peft.restart_deltas()

    t0 = time.perf_counter()
    ft_losses = finetune(pruned, peft, train_ds, cfg, stream=stream)
    timer["finetune"] = time.perf_counter() - t0
    if pruned.foundation_checksum() != pruned_sum:
        raise ContractError("frozen foundation weights changed during fine-tuning")

    t0 = time.perf_counter()
    accuracy = evaluate(pruned, eval_ds, cfg.batch_size, peft=peft)
    timer["evaluate"] = time.perf_counter() - t0

    report = RunReport(est_losses=est_losses, ft_losses=ft_losses,
                       accuracy=accuracy, counts_before=counts_before,
                       counts_after=counts_after, phase_seconds=timer,
                       plan=plan, config_lines=rc.to_lines(), notes=notes)
    arts = RunArtifacts(model=pruned, peft=peft, masks=masks, plan=plan,
                        train_ds=train_ds, eval_ds=eval_ds)
    return report, arts


def run_baseline(rc: RunConfig) -> Tuple[List[float], float]:
    """Unpruned reference: full module set fine-tuned for the whole budget."""
    cfg = rc.train
    model = FoundationModel(rc.model, seed=cfg.seed)
    train_ds, eval_ds = generate(rc.task)
    peft = attach_estimation_set(model, cfg.peft_kind, cfg.rank,
                                 cfg.lora_scale, seed=cfg.seed + 1)
    losses = finetune(model, peft, train_ds, cfg, steps=cfg.total_steps)
    accuracy = evaluate(model, eval_ds, cfg.batch_size, peft=peft)
    return losses, accuracy


def train_adapter_for_task(base: FoundationModel, task: TaskSpec,
                           cfg: TrainConfig, peft_seed: int
                           ) -> Tuple[PeftSet, float, Dataset]:
    """Fit a fresh module set over an existing (possibly pruned) base."""
    train_ds, eval_ds = generate(task)
    peft = attach_estimation_set(base, cfg.peft_kind, cfg.rank,
                                 cfg.lora_scale, seed=peft_seed)
    finetune(base, peft, train_ds, cfg, steps=cfg.total_steps - cfg.estimation_steps)
    accuracy = evaluate(base, eval_ds, cfg.batch_size, peft=peft)
    return peft, accuracy, eval_ds
