"""Acceptance gate: nine end-to-end properties, one verdict line each.

Each test exercises a whole subsystem at its contract tolerance and
reports a single PASS/FAIL line through the conftest registry, echoed in
the terminal summary.  Tolerances and time budgets live next to each
assertion.
"""

import os
import time
from dataclasses import replace
from statistics import mean

import numpy as np

from conftest import record_verdict
from prunelab import tensor as T
from prunelab.bench import BENCH_MODES
from prunelab.checkpoint import (build_checkpoint, instantiate,
                                 load_checkpoint, save_checkpoint,
                                 swap_adapter)
from prunelab.cli import main
from prunelab.config import build_run_config, parse_config_text
from prunelab.data import TaskSpec, generate, batch_stream
from prunelab.importance import ImportanceLedger, select_modules, select_ranks
from prunelab.masks import (MaskPenaltyConfig, MaskSet, mask_loss,
                            select_ffn_dims, select_heads)
from prunelab.model import FoundationModel, ModelConfig, foundation_param_count
from prunelab.optim import AdamW, WarmupSchedule
from prunelab.peft import attach_estimation_set
from prunelab.pipeline import (evaluate, run_all, run_baseline,
                               train_adapter_for_task)
from prunelab.plan import PruningPlan
from prunelab.tensor import Tensor, seeded_rng


# -- criterion 1: gradient integrity -----------------------------------------

FD_STEP = 1e-5
FD_RTOL = 1e-4


def _fd_max_relerr(build_loss, params, max_entries=None):
    """Worst central-difference mismatch across all sampled entries."""
    for p in params:
        p.zero_grad()
    T.backward(build_loss())
    worst = 0.0
    checked = 0
    for p in params:
        assert p.grad is not None, "parameter missing from the graph"
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        idx = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.linspace(0, flat.size - 1, max_entries).astype(int)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + FD_STEP
            hi = float(build_loss().data)
            flat[i] = orig - FD_STEP
            lo = float(build_loss().data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * FD_STEP)
            worst = max(worst, abs(grad[i] - numeric) / (1.0 + abs(numeric)))
            checked += 1
    return worst, checked


def _op_cases():
    rng = np.random.default_rng(11)

    def r(shape, requires_grad=True):
        return Tensor(rng.uniform(-2, 2, shape), requires_grad=requires_grad)

    def sink(x):
        return T.tsum(x * x)

    a, b = r((3, 4)), r((4, 5))
    cases = [("matmul", [a, b], lambda: sink(a @ b))]
    c, d = r((2, 3, 4)), r((4, 5))
    cases.append(("matmul batched", [c, d], lambda: sink(c @ d)))
    e, f = r((2, 1, 5)), r((3, 5))
    cases.append(("add broadcast", [e, f], lambda: sink(e + f)))
    cases.append(("mul broadcast", [e, f], lambda: sink(e * f)))
    g = r((4, 6))
    cases.append(("relu", [g], lambda: sink(T.activation(g, "relu"))))
    cases.append(("gelu", [g], lambda: sink(T.activation(g, "gelu"))))
    cases.append(("softmax", [g], lambda: sink(T.softmax(g))))
    cases.append(("layer_norm", [g], lambda: sink(T.layer_norm(
        g, Tensor(np.ones(6)), Tensor(np.zeros(6))))))
    h = r((5, 3))
    cases.append(("abs", [h], lambda: sink(T.tabs(h))))
    cases.append(("mean", [h], lambda: T.tmean(h * h)))
    cases.append(("sum", [h], lambda: T.tsum(h * h)))
    cases.append(("reshape/transpose", [h], lambda: sink(
        T.transpose(T.reshape(h, (3, 5)), (1, 0)))))
    table = r((7, 4))
    ids = np.array([[0, 3, 3, 6], [1, 2, 4, 0]])
    cases.append(("embedding", [table], lambda: sink(T.embedding(table, ids))))
    logits = r((6, 3))
    labels = np.array([0, 2, 1, 1, 0, 2])
    cases.append(("cross_entropy", [logits],
                  lambda: T.softmax_cross_entropy(logits, labels)))
    return cases


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    worst = 0.0
    worst_at = "none"
    checked = 0
    for name, params, build in _op_cases():
        err, n = _fd_max_relerr(build, params)
        if err > worst:
            worst, worst_at = err, name
        checked += n

    cfg = ModelConfig(vocab_size=18, max_seq=10, embed_dim=16, num_layers=2,
                      num_heads=2, ffn_dim=20, num_classes=2)
    model = FoundationModel(cfg, seed=3)
    peft = attach_estimation_set(model, "lora", 2, 2.0, seed=4)
    masks = MaskSet.for_model(model)
    penalty = MaskPenaltyConfig(1e-3, 1e-3)
    ids = np.random.default_rng(5).integers(0, 18, (3, 8))
    labels = np.random.default_rng(6).integers(0, 2, 3)
    # reopen a few frozen tensors so the check reaches every depth
    deep = [model.tok_emb, model.layers[0].w_q, model.layers[1].w_fc2]
    for p in deep:
        p.requires_grad = True
    params = (peft.parameters() + masks.parameters()
              + model.trainable_parameters() + deep)

    def build():
        logits = model.forward(ids, masks=masks, peft=peft)
        return mask_loss(T.softmax_cross_entropy(logits, labels), masks, penalty)

    err, n = _fd_max_relerr(build, params, max_entries=12)
    if err > worst:
        worst, worst_at = err, "two-layer model with masks and adapters"
    checked += n
    dt = time.perf_counter() - t0
    ok = worst < FD_RTOL and dt < 60
    assert record_verdict(
        1, ok, f"max FD rel error {worst:.2e} ({worst_at}) over {checked} "
               f"entries (tol {FD_RTOL:.0e}, step {FD_STEP:.0e}) in {dt:.1f}s")


# -- criterion 2: mask/structural equivalence ---------------------------------

def test_criterion_2_masked_equals_materialized():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        heads = int(rng.integers(1, 5))
        dh = int(rng.choice([4, 8, 16]))
        cfg = ModelConfig(
            vocab_size=int(rng.integers(8, 40)),
            max_seq=16,
            embed_dim=heads * dh,
            num_layers=int(rng.integers(1, 4)),
            num_heads=heads,
            ffn_dim=int(rng.integers(8, 33)),
            num_classes=2,
            causal=bool(rng.integers(0, 2)))
        model = FoundationModel(cfg, seed=int(rng.integers(0, 1000)))
        keep_heads = [sorted(rng.choice(heads, size=int(rng.integers(1, heads + 1)),
                                        replace=False).tolist())
                      for _ in range(cfg.num_layers)]
        keep_ffn = [sorted(rng.choice(cfg.ffn_dim,
                                      size=int(rng.integers(1, cfg.ffn_dim + 1)),
                                      replace=False).tolist())
                    for _ in range(cfg.num_layers)]
        plan = PruningPlan(keep_heads=keep_heads, keep_ffn=keep_ffn,
                           keep_modules=[], keep_ranks={})
        masks = MaskSet.for_model(model)
        for m in masks.parameters():
            m.data[:] = rng.uniform(0.5, 1.5, m.data.shape)
        masks.zero_dropped(plan)
        ids = rng.integers(0, cfg.vocab_size, (4, int(rng.integers(4, 13))))
        masked = model.forward(ids, masks=masks).data
        materialized = model.materialize(plan, masks).forward(ids).data
        worst = max(worst, float(np.abs(masked - materialized).max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 60
    assert record_verdict(
        2, ok, f"50 random configs, max |masked - materialized| = {worst:.2e} "
               f"(tol 1e-8) in {dt:.1f}s")


# -- criterion 3: zero-delta init ---------------------------------------------

def test_criterion_3_zero_delta_init():
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=32, max_seq=32, embed_dim=64, num_layers=4,
                      num_heads=4, ffn_dim=128, num_classes=2)
    model = FoundationModel(cfg, seed=9)
    peft = attach_estimation_set(model, "lora", 8, 2.0, seed=10)
    ids = np.random.default_rng(11).integers(0, 32, (8, 32))
    bare = model.forward(ids).data
    ledger = ImportanceLedger(peft)
    peft.observe_into(ledger)
    with_modules = model.forward(ids, peft=peft).data
    peft.observe_into(None)
    gap = float(np.abs(bare - with_modules).max())
    means = list(ledger.module_mean.values())
    counts = list(ledger.module_count.values())
    dt = time.perf_counter() - t0
    ok = (gap <= 1e-12 and len(means) == 24 and all(v == 0.0 for v in means)
          and all(c == 1 for c in counts))
    assert record_verdict(
        3, ok, f"logit gap {gap:.1e} (tol 1e-12); {len(means)} modules "
               f"all recorded importance exactly 0.0 in {dt:.1f}s")


# -- criterion 4: selection arithmetic at reference shapes ---------------------

def test_criterion_4_selection_arithmetic():
    t0 = time.perf_counter()
    # encoder-scale shape: 24 layers, d=1024, 16 heads, ffn 4096
    big = ModelConfig(vocab_size=50265, max_seq=514, embed_dim=1024,
                      num_layers=24, num_heads=16, ffn_dim=4096, num_classes=2)
    masks = MaskSet([big.num_heads] * big.num_layers,
                    [big.ffn_dim] * big.num_layers)
    rng = seeded_rng(12)
    for m in masks.parameters():
        m.data[:] = rng.uniform(0.5, 1.5, m.data.shape)
    keep_heads = select_heads(masks, 5.0 / 16.0)
    keep_ffn = select_ffn_dims(masks, 1.0 / 3.0)
    dense = foundation_param_count(big)
    pruned = foundation_param_count(big, [len(k) for k in keep_heads],
                                    [len(k) for k in keep_ffn])
    retention = pruned / dense
    heads_ok = all(len(k) == 11 for k in keep_heads)
    ffn_total = sum(len(k) for k in keep_ffn)
    ffn_ok = ffn_total == 24 * 4096 - 32768

    # deep-decoder-scale shape: 32 layers -> 192 attachable modules
    deep = ModelConfig(vocab_size=32, max_seq=16, embed_dim=64, num_layers=32,
                       num_heads=4, ffn_dim=128, num_classes=2)
    peft = attach_estimation_set(FoundationModel(deep, seed=13), "lora", 2,
                                 2.0, seed=14)
    ledger = ImportanceLedger(peft)
    for key in ledger.keys():
        ledger.record_module(key, float(rng.uniform(0.1, 1.0)))
    kept = select_modules(ledger, 0.75)
    dt = time.perf_counter() - t0
    ok = (abs(retention - 0.72) <= 0.02 and heads_ok and ffn_ok
          and len(ledger.keys()) == 192 and len(kept) == 48 and dt < 60)
    assert record_verdict(
        4, ok, f"retention {100 * retention:.2f}% (target 72 +/- 2) with "
               f"11/16 heads per layer and {ffn_total} ffn dims kept; "
               f"module cut 192 -> {len(kept)} (target 48) in {dt:.1f}s")


# -- criterion 5: Taylor importance against a stored-everything oracle ---------

def test_criterion_5_taylor_oracle():
    t0 = time.perf_counter()
    text = ("task = parity\nvocab_size = 20\nmax_seq = 12\nseq_len = 12\n"
            "embed_dim = 16\nnum_layers = 2\nnum_heads = 2\nffn_dim = 24\n"
            "train_size = 320\neval_size = 64\nbatch_size = 16\n"
            "total_steps = 40\nestimation_steps = 20\nrank = 4\nseed = 15\n")
    rc = build_run_config(parse_config_text(text))
    cfg = rc.train
    model = FoundationModel(rc.model, seed=cfg.seed)
    train_ds, _ = generate(rc.task)
    peft = attach_estimation_set(model, "lora", cfg.rank, cfg.lora_scale,
                                 seed=cfg.seed + 1)
    masks = MaskSet.for_model(model)
    stream = batch_stream(train_ds, cfg.batch_size, cfg.seed + 3)
    params = peft.parameters() + masks.parameters() + model.trainable_parameters()
    opt = AdamW(params, lr=cfg.lr_estimation, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    sched = WarmupSchedule(cfg.lr_estimation, 20, cfg.warmup_frac)
    penalty = MaskPenaltyConfig(cfg.lambda_a, cfg.lambda_f)
    ledger = ImportanceLedger(peft)
    peft.observe_into(ledger)
    stored = {key: [] for key in peft.modules}
    for step in range(20):
        ids, labels = next(stream)
        logits = model.forward(ids, masks=masks, peft=peft)
        loss = mask_loss(T.softmax_cross_entropy(logits, labels), masks, penalty)
        opt.zero_grad()
        T.backward(loss)
        ledger.accumulate_ranks(peft)
        for key, m in peft.modules.items():
            stored[key].append((m.w_down.grad.copy(), m.w_down.data.copy(),
                                m.w_up.grad.copy(), m.w_up.data.copy()))
        opt.set_lr(sched.lr_at(step))
        opt.step()
    peft.observe_into(None)

    worst = 0.0
    oracle_scores = {}
    for key, snaps in stored.items():
        per_step = np.array([np.abs(gd * wd).sum(axis=0)
                             + np.abs(gu * wu).sum(axis=1)
                             for gd, wd, gu, wu in snaps])
        oracle_scores[key] = per_step.sum(axis=0)
        worst = max(worst, float(
            np.abs(oracle_scores[key] - ledger.rank_scores[key]).max()))

    kept_modules = select_modules(ledger, 0.5)
    got = select_ranks(ledger, kept_modules, 0.5)
    pool = []
    for pos, key in enumerate(kept_modules):
        for rid in range(cfg.rank):
            pool.append((oracle_scores[key][rid], pos, rid))
    pool.sort()
    dropped = {(pos, rid) for _, pos, rid in pool[:len(pool) // 2]}
    want = {}
    for pos, key in enumerate(kept_modules):
        kept = [rid for rid in range(cfg.rank) if (pos, rid) not in dropped]
        if not kept:
            kept = [int(np.argmax(oracle_scores[key]))]
        want[key] = kept
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and got == want and dt < 60
    assert record_verdict(
        5, ok, f"20-step incremental vs stored-everything gap {worst:.1e} "
               f"(tol 1e-10); selection matches oracle argsort across "
               f"{len(pool)} pooled ranks in {dt:.1f}s")


# -- criterion 6: end-to-end quality retention ---------------------------------

def test_criterion_6_quality_retention():
    t0 = time.perf_counter()
    lines = []
    ok = True
    for task in ("parity", "majority", "pattern"):
        base_accs, pruned_accs = [], []
        for seed in (0, 1, 2):
            text = (f"task = {task}\nseed = {seed}\n"
                    "total_steps = 400\nestimation_steps = 40\n")
            rc = build_run_config(parse_config_text(text))
            _, base_acc = run_baseline(rc)
            report, _ = run_all(rc)
            base_accs.append(base_acc)
            pruned_accs.append(report.accuracy)
        b, p = mean(base_accs), mean(pruned_accs)
        lines.append(f"{task} base {b:.3f} pruned {p:.3f}")
        ok = ok and p >= b - 0.02
    dt = time.perf_counter() - t0
    ok = ok and dt < 900
    assert record_verdict(
        6, ok, "; ".join(lines) + f" (3-seed means, pruned >= base - 0.02) "
               f"in {dt:.0f}s (budget 900s)")


# -- criterion 7: efficiency direction ------------------------------------------

def test_criterion_7_efficiency_direction():
    t0 = time.perf_counter()
    rows = BENCH_MODES["pruned-vs-dense"](seed=0)
    by_label = {r.label: r for r in rows}
    dense, pruned = by_label["dense"], by_label["pruned"]
    speedup = dense.forward_median / pruned.forward_median
    reduction = 1.0 - pruned.total_bytes / dense.total_bytes
    dt = time.perf_counter() - t0
    ok = speedup >= 1.20 - 0.15 and reduction >= 0.30 and dt < 300
    assert record_verdict(
        7, ok, f"forward speedup {speedup:.2f}x (floor 1.05x after tolerance), "
               f"live-byte reduction {100 * reduction:.1f}% (floor 30%) "
               f"in {dt:.0f}s")


# -- criterion 8: sweep shapes ---------------------------------------------------

def _sweep_accuracies(axis, cfg_text, tmp_path, values=None):
    cfg_path = str(tmp_path / f"sweep_{axis}.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(cfg_text)
    out = str(tmp_path / f"out_{axis}")
    argv = ["sweep", "--config", cfg_path, "--out", out,
            "--axis", axis, "--format", "tsv"]
    if values is not None:
        argv += ["--values", values]
    code = main(argv)
    assert code == 0, f"sweep {axis} exited {code}"
    accs = {}
    with open(os.path.join(out, f"sweep_{axis}.tsv")) as fh:
        next(fh)
        for line in fh:
            value, acc = line.split("\t")[:2]
            accs[float(value)] = float(acc)
    return accs


def test_criterion_8_sweep_shapes(tmp_path, capsys):
    t0 = time.perf_counter()
    steps = "total_steps = 400\nestimation_steps = 40\nseed = 0\n"

    # pruning rate: flat while redundancy lasts, steep once capacity binds.
    # The 8-way counting task is the one whose capacity the toy model can
    # actually exhaust; the axis extends until it does.
    rho = _sweep_accuracies(
        "rho", f"task = majority\nnum_classes = 8\neval_size = 1024\n{steps}",
        tmp_path, values="0.0,0.25,0.5,0.9,0.95")
    rho_ok = (rho[0.25] >= rho[0.0] - 0.05
              and rho[0.9] <= rho[0.0] - 0.05
              and rho[0.95] <= rho[0.0] - 0.05)

    # estimation budget: none is worse than some, and more than the knee
    # stops paying.
    tp = _sweep_accuracies(
        "t_prime", f"task = pattern\neval_size = 1024\n{steps}", tmp_path)
    tp_ok = (tp[0.0] <= tp[0.1] - 0.01 and tp[0.0] < tp[0.2]
             and tp[0.2] <= tp[0.1] + 0.02)

    # mask penalty: best in the middle, both extremes at or below the peak
    lam = _sweep_accuracies("lambda", f"task = majority\n{steps}", tmp_path)
    peak = max(lam[1e-3], lam[1e-4])
    lam_ok = peak >= lam[1e-2] and peak > lam[1e-5]

    capsys.readouterr()
    dt = time.perf_counter() - t0
    ok = rho_ok and tp_ok and lam_ok and dt < 1800
    assert record_verdict(
        8, ok, f"rho {rho[0.0]:.3f}/{rho[0.25]:.3f}/{rho[0.5]:.3f} then "
               f"{rho[0.9]:.3f}/{rho[0.95]:.3f} (decline past threshold); "
               f"t' {tp[0.0]:.3f} -> {tp[0.1]:.3f} knee, {tp[0.2]:.3f} "
               f"plateau; lambda peak {peak:.3f} interior vs endpoints "
               f"{lam[1e-2]:.3f}/{lam[1e-5]:.3f}; in {dt:.0f}s (budget 1800s)")


# -- criterion 9: persistence and plug-and-play ----------------------------------

def test_criterion_9_persistence_and_swap(tmp_path):
    t0 = time.perf_counter()
    text = ("task = majority\nseed = 3\ntrain_size = 512\neval_size = 256\n"
            "total_steps = 120\nestimation_steps = 12\n")
    rc = build_run_config(parse_config_text(text))
    report_a, arts = run_all(rc)
    ids_a = arts.eval_ds.tokens[:64]
    logits_a = arts.model.forward(ids_a, peft=arts.peft).data.copy()
    acc_a = report_a.accuracy
    ckpt_a = build_checkpoint(rc.train.seed, arts.model, arts.plan,
                              arts.masks, arts.peft)
    path_a = str(tmp_path / "a.lpft")
    save_checkpoint(path_a, ckpt_a)

    # bit-exact round trip: load and re-save, byte-identical file
    path_a2 = str(tmp_path / "a2.lpft")
    save_checkpoint(path_a2, load_checkpoint(path_a))
    with open(path_a, "rb") as fh:
        raw_a = fh.read()
    with open(path_a2, "rb") as fh:
        raw_a2 = fh.read()
    roundtrip_ok = raw_a == raw_a2
    model_a, peft_a = instantiate(load_checkpoint(path_a))
    restore_ok = np.array_equal(model_a.forward(ids_a, peft=peft_a).data,
                                logits_a)

    # a second task's adapter over the same pruned backbone
    task_b = TaskSpec(kind="pattern", vocab_size=rc.task.vocab_size,
                      seq_len=rc.task.seq_len, num_classes=2,
                      train_size=512, eval_size=256, seed=rc.task.seed + 50)
    peft_b, acc_b, eval_b = train_adapter_for_task(
        arts.model, task_b, replace(rc.train, seed=rc.train.seed + 7),
        peft_seed=rc.train.seed + 7)
    ids_b = eval_b.tokens[:64]
    logits_b = arts.model.forward(ids_b, peft=peft_b).data.copy()
    ckpt_b = build_checkpoint(rc.train.seed, arts.model, arts.plan,
                              arts.masks, peft_b)
    path_b = str(tmp_path / "b.lpft")
    save_checkpoint(path_b, ckpt_b)

    model_ab, peft_ab = swap_adapter(load_checkpoint(path_a),
                                     load_checkpoint(path_b))
    swap_b_ok = (np.array_equal(model_ab.forward(ids_b, peft=peft_ab).data,
                                logits_b)
                 and evaluate(model_ab, eval_b, rc.train.batch_size,
                              peft=peft_ab) == acc_b)
    model_ba, peft_ba = swap_adapter(load_checkpoint(path_b),
                                     load_checkpoint(path_a))
    swap_a_ok = (np.array_equal(model_ba.forward(ids_a, peft=peft_ba).data,
                                logits_a)
                 and evaluate(model_ba, arts.eval_ds, rc.train.batch_size,
                              peft=peft_ba) == acc_a)
    dt = time.perf_counter() - t0
    ok = roundtrip_ok and restore_ok and swap_b_ok and swap_a_ok and dt < 120
    assert record_verdict(
        9, ok, f"round trip byte-identical: {roundtrip_ok}; reload "
               f"logit-identical: {restore_ok}; adapter swap restored both "
               f"tasks exactly (acc {acc_a:.3f} / {acc_b:.3f}) in {dt:.0f}s")
