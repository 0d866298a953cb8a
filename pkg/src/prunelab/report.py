"""Render run, bench, and sweep results as text, TSV, and PNG figures."""

from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchRow  # noqa: E402
from .pipeline import RunReport  # noqa: E402
from .plan import PruningPlan  # noqa: E402


def summarize_plan(plan: PruningPlan) -> List[str]:
    heads = [len(h) for h in plan.keep_heads]
    ffn = sum(len(f) for f in plan.keep_ffn)
    ranks = sum(len(r) for r in plan.keep_ranks.values())
    return [
        f"heads kept per layer: {heads}",
        f"ffn dims kept: {ffn}",
        f"modules kept: {len(plan.keep_modules)}",
        f"ranks kept: {ranks}",
    ]


def _fmt_counts(c: Dict[str, int]) -> str:
    return (f"foundation {c['foundation']}, peft {c['peft']}, "
            f"classifier {c['classifier']}, masks {c['masks']}")


def render_run_report(r: RunReport, fmt: str = "text") -> str:
    if fmt == "tsv":
        rows = [
            ("result", "accuracy", f"{r.accuracy:.6f}"),
            ("result", "foundation_retention", f"{r.foundation_retention:.6f}"),
            ("params_before", "foundation", r.counts_before["foundation"]),
            ("params_before", "trainable", r.counts_before["trainable"]),
            ("params_after", "foundation", r.counts_after["foundation"]),
            ("params_after", "trainable", r.counts_after["trainable"]),
        ]
        for phase, secs in r.phase_seconds.items():
            rows.append(("seconds", phase, f"{secs:.3f}"))
        for line in summarize_plan(r.plan):
            key, _, val = line.partition(": ")
            rows.append(("plan", key.replace(" ", "_"), val))
        if r.est_losses:
            rows.append(("loss", "estimation_first", f"{r.est_losses[0]:.6f}"))
            rows.append(("loss", "estimation_last", f"{r.est_losses[-1]:.6f}"))
        if r.ft_losses:
            rows.append(("loss", "finetune_first", f"{r.ft_losses[0]:.6f}"))
            rows.append(("loss", "finetune_last", f"{r.ft_losses[-1]:.6f}"))
        for line in r.config_lines:
            key, _, val = line.partition(" = ")
            rows.append(("config", key, val))
        return "\n".join(f"{a}\t{b}\t{c}" for a, b, c in rows) + "\n"

    lines = ["== run report =="]
    lines.append(f"eval accuracy: {r.accuracy:.4f}")
    lines.append(f"foundation params: {r.counts_before['foundation']} -> "
                 f"{r.counts_after['foundation']} "
                 f"(retention {100 * r.foundation_retention:.2f}%)")
    lines.append(f"trainable params: {r.counts_before['trainable']} -> "
                 f"{r.counts_after['trainable']}")
    lines.append(f"  before: {_fmt_counts(r.counts_before)}")
    lines.append(f"  after:  {_fmt_counts(r.counts_after)}")
    lines.append("plan: " + "; ".join(summarize_plan(r.plan)))
    for phase, secs in r.phase_seconds.items():
        lines.append(f"{phase}: {secs:.2f}s")
    if r.est_losses:
        lines.append(f"estimation loss {r.est_losses[0]:.4f} -> {r.est_losses[-1]:.4f} "
                     f"({len(r.est_losses)} steps)")
    if r.ft_losses:
        lines.append(f"finetune loss {r.ft_losses[0]:.4f} -> {r.ft_losses[-1]:.4f} "
                     f"({len(r.ft_losses)} steps)")
    for note in r.notes:
        lines.append(f"note: {note}")
    lines.append("-- resolved config --")
    lines.extend(r.config_lines)
    return "\n".join(lines) + "\n"


def write_run_figure(r: RunReport, path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    n_est = len(r.est_losses)
    if r.est_losses:
        ax.plot(range(n_est), r.est_losses, label="estimation", color="tab:orange")
    if r.ft_losses:
        ax.plot(range(n_est, n_est + len(r.ft_losses)), r.ft_losses,
                label="fine-tune", color="tab:blue")
    if n_est:
        ax.axvline(n_est - 0.5, color="gray", linestyle=":", label="prune")
    ax.set_xlabel("step")
    ax.set_ylabel("task loss")
    ax.set_title(f"training curve (eval acc {r.accuracy:.3f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_bench(rows: Sequence[BenchRow], fmt: str = "text") -> str:
    if fmt == "tsv":
        out = ["label\tforward_s\tbackward_s\ttotal_bytes\tfoundation_params"
               "\ttrainable_params\treps"]
        for r in rows:
            out.append(f"{r.label}\t{r.forward_median:.4f}\t{r.backward_median:.4f}"
                       f"\t{r.total_bytes}\t{r.foundation_params}"
                       f"\t{r.trainable_params}\t{len(r.forward_times)}")
        return "\n".join(out) + "\n"
    lines = ["== bench =="]
    for r in rows:
        lines.append(f"{r.label}: forward {r.forward_median:.4f}s, "
                     f"backward {r.backward_median:.4f}s (10-batch sums), "
                     f"live bytes {r.total_bytes}, "
                     f"params {r.foundation_params}+{r.trainable_params}, "
                     f"{r.variance_note()}")
    if len(rows) == 2:
        a, b = rows
        lines.append(f"forward speedup {a.label}/{b.label}: "
                     f"{a.forward_median / b.forward_median:.2f}x; "
                     f"bytes ratio {b.total_bytes / a.total_bytes:.2f}")
    return "\n".join(lines) + "\n"


def write_bench_figure(rows: Sequence[BenchRow], path: str) -> None:
    labels = [r.label for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    x = range(len(rows))
    ax1.bar([i - 0.2 for i in x], [r.forward_median for r in rows], 0.4,
            label="forward")
    ax1.bar([i + 0.2 for i in x], [r.backward_median for r in rows], 0.4,
            label="backward")
    ax1.set_xticks(list(x), labels, rotation=20)
    ax1.set_ylabel("seconds per 10 batches")
    ax1.legend()
    ax2.bar(list(x), [r.total_bytes / 1e6 for r in rows], 0.5, color="tab:green")
    ax2.set_xticks(list(x), labels, rotation=20)
    ax2.set_ylabel("live MB")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_sweep(axis: str, rows: Sequence[Dict], fmt: str = "text") -> str:
    if fmt == "tsv":
        out = ["value\taccuracy\tfoundation_retention\ttrainable_params\tseconds"]
        for r in rows:
            out.append(f"{r['value']}\t{r['accuracy']:.4f}\t{r['retention']:.4f}"
                       f"\t{r['trainable']}\t{r['seconds']:.2f}")
        return "\n".join(out) + "\n"
    lines = [f"== sweep over {axis} =="]
    for r in rows:
        lines.append(f"{axis}={r['value']}: accuracy {r['accuracy']:.4f}, "
                     f"retention {100 * r['retention']:.1f}%, "
                     f"trainable {r['trainable']}, {r['seconds']:.1f}s")
    return "\n".join(lines) + "\n"


def write_sweep_figure(axis: str, rows: Sequence[Dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r["value"] for r in rows]
    ys = [r["accuracy"] for r in rows]
    ax.plot(xs, ys, marker="o")
    if axis == "lambda" and all(x > 0 for x in xs):
        ax.set_xscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("eval accuracy")
    ax.set_title(f"accuracy vs {axis}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ensure_out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
