"""Command-line front end for the estimation/prune/fine-tune lifecycle.

Exit codes: 0 success, 1 usage, 2 bad config, 3 runtime failure.
Reports go to stdout and files under --out; warnings go to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional

from . import pipeline
from .bench import BENCH_MODES
from .checkpoint import build_checkpoint, load_checkpoint, save_checkpoint, swap_adapter
from .config import RunConfig, build_run_config, parse_config_text
from .errors import ConfigError, PruneLabError
from .masks import MaskSet
from .model import FoundationModel
from .peft import attach_estimation_set
from .pipeline import TIE_BREAK_WARNING
from .report import (ensure_out_dir, render_bench, render_run_report,
                     render_sweep, summarize_plan, write_bench_figure,
                     write_run_figure, write_sweep_figure)

SWEEP_DEFAULTS = {
    "rho": "0.0,0.25,0.5,0.75",
    "t_prime": "0.0,0.05,0.1,0.2",
    "lambda": "1e-2,1e-3,1e-4,1e-5",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--format", choices=("text", "tsv"), default="text", dest="fmt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prunelab",
                     description="early estimation and structured pruning of a "
                                 "frozen transformer and its low-rank modules")
    sub = parser.add_subparsers(dest="command", required=True)

    cmds = {
        "estimate": "run the estimation phase and dump the importance ledger",
        "prune": "estimate, prune, and save the pruned checkpoint",
        "finetune": "estimate, prune, and fine-tune; saves the final checkpoint",
        "run-all": "full lifecycle with evaluation, report, and figures",
        "eval": "evaluate a saved checkpoint on the configured task",
        "swap": "rebase an adapter checkpoint onto a base checkpoint and evaluate",
        "bench": "efficiency measurements",
        "sweep": "repeat the pipeline across one hyper-parameter axis",
    }
    parsers = {}
    for name, help_text in cmds.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        parsers[name] = p
    parsers["eval"].add_argument("--checkpoint", required=True)
    parsers["swap"].add_argument("--base", required=True,
                                 help="checkpoint providing the pruned backbone")
    parsers["swap"].add_argument("--adapter", required=True,
                                 help="checkpoint providing modules and classifier")
    parsers["bench"].add_argument("--mode", required=True,
                                  choices=sorted(BENCH_MODES.keys()))
    parsers["sweep"].add_argument("--axis", required=True,
                                  choices=("rho", "t_prime", "lambda"))
    parsers["sweep"].add_argument("--values", default=None,
                                  help="comma-separated axis values")
    return parser


def _load_rc(args) -> RunConfig:
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from None
    values = parse_config_text(text)
    if args.seed is not None:
        values["seed"] = args.seed
    return build_run_config(values)


def _ext(fmt: str) -> str:
    return "txt" if fmt == "text" else "tsv"


def _write(out_dir: str, name: str, content: str) -> str:
    path = os.path.join(ensure_out_dir(out_dir), name)
    with open(path, "w") as fh:
        fh.write(content)
    return path


def _setup(rc: RunConfig):
    from .data import generate
    model = FoundationModel(rc.model, seed=rc.train.seed)
    train_ds, eval_ds = generate(rc.task)
    peft = attach_estimation_set(model, rc.train.peft_kind, rc.train.rank,
                                 rc.train.lora_scale, seed=rc.train.seed + 1)
    masks = MaskSet.for_model(model)
    return model, train_ds, eval_ds, peft, masks


def _ledger_tsv(ledger) -> str:
    lines = ["layer\tsite\tmean_importance\trank_scores"]
    for layer, site, mean, scores in ledger.dump_rows():
        joined = ",".join(f"{s:.6e}" for s in scores)
        lines.append(f"{layer}\t{site}\t{mean:.6e}\t{joined}")
    return "\n".join(lines) + "\n"


def _warn_if_skipped(rc: RunConfig) -> None:
    if rc.train.estimation_steps == 0:
        print(f"warning: {TIE_BREAK_WARNING}", file=sys.stderr)


def cmd_estimate(args) -> int:
    rc = _load_rc(args)
    _warn_if_skipped(rc)
    model, train_ds, _, peft, masks = _setup(rc)
    ledger, losses = pipeline.estimate(model, peft, masks, train_ds, rc.train)
    path = _write(args.out, "ledger.tsv", _ledger_tsv(ledger))
    print(f"estimation: {len(losses)} steps"
          + (f", task loss {losses[0]:.4f} -> {losses[-1]:.4f}" if losses else ""))
    print(f"ledger written to {path}")
    return 0


def cmd_prune(args) -> int:
    rc = _load_rc(args)
    _warn_if_skipped(rc)
    model, train_ds, _, peft, masks = _setup(rc)
    ledger, _ = pipeline.estimate(model, peft, masks, train_ds, rc.train)
    pruned, peft, plan = pipeline.prune_all(model, peft, masks, ledger, rc.train)
    peft.restart_deltas()
    before = model.count_params()
    after = pruned.count_params(peft)
    for line in summarize_plan(plan):
        print(line)
    print(f"foundation params {before['foundation']} -> {after['foundation']} "
          f"({100 * after['foundation'] / before['foundation']:.2f}% retained)")
    ckpt = build_checkpoint(rc.train.seed, pruned, plan, masks, peft)
    path = os.path.join(ensure_out_dir(args.out), "checkpoint.lpft")
    save_checkpoint(path, ckpt)
    print(f"checkpoint written to {path}")
    return 0


def cmd_finetune(args) -> int:
    rc = _load_rc(args)
    _warn_if_skipped(rc)
    model, train_ds, _, peft, masks = _setup(rc)
    ledger, _ = pipeline.estimate(model, peft, masks, train_ds, rc.train)
    pruned, peft, plan = pipeline.prune_all(model, peft, masks, ledger, rc.train)
    peft.restart_deltas()
    losses = pipeline.finetune(pruned, peft, train_ds, rc.train)
    if losses:
        print(f"fine-tune: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    ckpt = build_checkpoint(rc.train.seed, pruned, plan, masks, peft)
    path = os.path.join(ensure_out_dir(args.out), "checkpoint.lpft")
    save_checkpoint(path, ckpt)
    print(f"checkpoint written to {path}")
    return 0


def cmd_run_all(args) -> int:
    rc = _load_rc(args)
    report, arts = pipeline.run_all(rc)
    for note in report.notes:
        print(f"warning: {note}", file=sys.stderr)
    out = ensure_out_dir(args.out)
    ckpt = build_checkpoint(rc.train.seed, arts.model, arts.plan, arts.masks, arts.peft)
    save_checkpoint(os.path.join(out, "checkpoint.lpft"), ckpt)
    text = render_run_report(report, args.fmt)
    _write(out, f"report.{_ext(args.fmt)}", text)
    write_run_figure(report, os.path.join(out, "run_report.png"))
    sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    rc = _load_rc(args)
    from .checkpoint import instantiate
    from .data import generate
    ckpt = load_checkpoint(args.checkpoint)
    model, peft = instantiate(ckpt)
    _, eval_ds = generate(rc.task)
    acc = pipeline.evaluate(model, eval_ds, rc.train.batch_size, peft=peft)
    print(f"eval accuracy: {acc:.4f}")
    return 0


def cmd_swap(args) -> int:
    rc = _load_rc(args)
    from .data import generate
    base = load_checkpoint(args.base)
    adapter = load_checkpoint(args.adapter)
    model, peft = swap_adapter(base, adapter)
    _, eval_ds = generate(rc.task)
    acc = pipeline.evaluate(model, eval_ds, rc.train.batch_size, peft=peft)
    print(f"swapped adapter eval accuracy: {acc:.4f}")
    return 0


def cmd_bench(args) -> int:
    rc = _load_rc(args)
    rows = BENCH_MODES[args.mode](seed=rc.train.seed)
    text = render_bench(rows, args.fmt)
    out = ensure_out_dir(args.out)
    _write(out, f"bench_{args.mode}.{_ext(args.fmt)}", text)
    write_bench_figure(rows, os.path.join(out, f"bench_{args.mode}.png"))
    sys.stdout.write(text)
    return 0


def _sweep_values(args) -> List[float]:
    raw = args.values if args.values is not None else SWEEP_DEFAULTS[args.axis]
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad sweep values {raw!r}") from None
    if len(values) < 2:
        raise ConfigError("sweep needs at least 2 values")
    return values


def apply_axis(rc: RunConfig, axis: str, value: float) -> RunConfig:
    if axis == "rho":
        if not 0 <= value < 1:
            raise ConfigError(f"rho sweep value {value} outside [0, 1)")
        train = replace(rc.train, rho_a=value, rho_f=value, rho_m=value, rho_r=value)
    elif axis == "t_prime":
        if not 0 <= value < 1:
            raise ConfigError(f"t_prime sweep fraction {value} outside [0, 1)")
        train = replace(rc.train,
                        estimation_steps=int(round(value * rc.train.total_steps)))
    else:
        if value < 0:
            raise ConfigError(f"lambda sweep value {value} must be nonnegative")
        train = replace(rc.train, lambda_a=value, lambda_f=value)
    return RunConfig(model=rc.model, task=rc.task, train=train)


def cmd_sweep(args) -> int:
    rc = _load_rc(args)
    values = _sweep_values(args)
    rows = []
    for v in values:
        report, _ = pipeline.run_all(apply_axis(rc, args.axis, v))
        for note in report.notes:
            print(f"warning ({args.axis}={v}): {note}", file=sys.stderr)
        rows.append({
            "value": v,
            "accuracy": report.accuracy,
            "retention": report.foundation_retention,
            "trainable": report.counts_after["trainable"],
            "seconds": sum(report.phase_seconds.values()),
        })
    text = render_sweep(args.axis, rows, args.fmt)
    out = ensure_out_dir(args.out)
    _write(out, f"sweep_{args.axis}.{_ext(args.fmt)}", text)
    write_sweep_figure(args.axis, rows, os.path.join(out, f"sweep_{args.axis}.png"))
    sys.stdout.write(text)
    return 0


_HANDLERS = {
    "estimate": cmd_estimate,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "run-all": cmd_run_all,
    "eval": cmd_eval,
    "swap": cmd_swap,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PruneLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        print(f"unexpected error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
