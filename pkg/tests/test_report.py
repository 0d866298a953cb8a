"""Rendering: text and TSV reports agree with their inputs, figures are PNGs."""

import os

import pytest

from prunelab.bench import BenchRow
from prunelab.config import build_run_config, parse_config_text
from prunelab.pipeline import run_all
from prunelab.plan import PruningPlan
from prunelab.report import (ensure_out_dir, render_bench, render_run_report,
                             render_sweep, summarize_plan, write_bench_figure,
                             write_run_figure, write_sweep_figure)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

TINY = """
task = parity
vocab_size = 16
max_seq = 12
seq_len = 12
embed_dim = 16
num_layers = 2
num_heads = 2
ffn_dim = 24
train_size = 96
eval_size = 48
batch_size = 16
total_steps = 12
estimation_steps = 4
rank = 4
seed = 5
"""


@pytest.fixture(scope="module")
def tiny_report():
    rc = build_run_config(parse_config_text(TINY))
    report, _ = run_all(rc)
    return report


def _tsv_rows(text):
    rows = [line.split("\t") for line in text.rstrip("\n").split("\n")]
    assert all(len(r) == 3 for r in rows)
    return {(r[0], r[1]): r[2] for r in rows}


def test_summarize_plan_lines():
    plan = PruningPlan(keep_heads=[[0, 2], [1]], keep_ffn=[[0, 1, 3], [2]],
                       keep_modules=[(0, "q"), (1, "fc1")],
                       keep_ranks={(0, "q"): [0, 3], (1, "fc1"): [1]})
    lines = summarize_plan(plan)
    assert lines[0] == "heads kept per layer: [2, 1]"
    assert lines[1] == "ffn dims kept: 4"
    assert lines[2] == "modules kept: 2"
    assert lines[3] == "ranks kept: 3"


def test_run_report_text_fields(tiny_report):
    r = tiny_report
    text = render_run_report(r, "text")
    assert f"eval accuracy: {r.accuracy:.4f}" in text
    assert f"retention {100 * r.foundation_retention:.2f}%" in text
    assert f"{r.counts_before['foundation']} -> {r.counts_after['foundation']}" in text
    for phase in ("setup", "estimate", "prune", "finetune", "evaluate"):
        assert f"\n{phase}: " in text
    assert "-- resolved config --" in text
    for line in r.config_lines:
        assert line in text


def test_run_report_text_plan_matches(tiny_report):
    text = render_run_report(tiny_report, "text")
    for piece in summarize_plan(tiny_report.plan):
        assert piece in text


def test_run_report_tsv_values(tiny_report):
    r = tiny_report
    rows = _tsv_rows(render_run_report(r, "tsv"))
    assert rows[("result", "accuracy")] == f"{r.accuracy:.6f}"
    assert rows[("result", "foundation_retention")] == f"{r.foundation_retention:.6f}"
    assert int(rows[("params_before", "foundation")]) == r.counts_before["foundation"]
    assert int(rows[("params_after", "trainable")]) == r.counts_after["trainable"]
    for phase in r.phase_seconds:
        assert ("seconds", phase) in rows
    assert rows[("loss", "estimation_first")] == f"{r.est_losses[0]:.6f}"
    assert rows[("loss", "finetune_last")] == f"{r.ft_losses[-1]:.6f}"


def test_run_report_tsv_config_round_trip(tiny_report):
    rows = _tsv_rows(render_run_report(tiny_report, "tsv"))
    got = {k[1]: v for k, v in rows.items() if k[0] == "config"}
    want = dict(line.split(" = ") for line in tiny_report.config_lines)
    assert got == want


def test_run_figure_is_png(tiny_report, tmp_path):
    path = str(tmp_path / "run.png")
    write_run_figure(tiny_report, path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    assert head == PNG_MAGIC
    assert os.path.getsize(path) > 1000


def _bench_rows():
    dense = BenchRow(label="dense", forward_times=[0.30, 0.32, 0.31],
                     backward_times=[0.60, 0.61, 0.59],
                     byte_parts={"weights": 800, "activations": 200},
                     foundation_params=100, trainable_params=10)
    pruned = BenchRow(label="pruned", forward_times=[0.20, 0.21, 0.19],
                      backward_times=[0.40, 0.41, 0.39],
                      byte_parts={"weights": 500, "activations": 100},
                      foundation_params=60, trainable_params=5)
    return [dense, pruned]


def test_bench_text_speedup_line():
    text = render_bench(_bench_rows(), "text")
    assert "forward speedup dense/pruned: 1.55x" in text
    assert "bytes ratio 0.60" in text
    assert "dense: forward 0.3100s" in text
    assert "live bytes 1000" in text


def test_bench_text_no_ratio_for_other_arities():
    rows = _bench_rows()
    assert "speedup" not in render_bench(rows[:1], "text")
    assert "speedup" not in render_bench(rows + rows, "text")


def test_bench_tsv_shape():
    lines = render_bench(_bench_rows(), "tsv").rstrip("\n").split("\n")
    assert lines[0] == ("label\tforward_s\tbackward_s\ttotal_bytes"
                       "\tfoundation_params\ttrainable_params\treps")
    assert lines[1] == "dense\t0.3100\t0.6000\t1000\t100\t10\t3"
    assert lines[2] == "pruned\t0.2000\t0.4000\t600\t60\t5\t3"


def test_bench_figure_is_png(tmp_path):
    path = str(tmp_path / "bench.png")
    write_bench_figure(_bench_rows(), path)
    with open(path, "rb") as fh:
        assert fh.read(8) == PNG_MAGIC


def _sweep_rows():
    return [
        {"value": 0.0, "accuracy": 0.95, "retention": 1.0,
         "trainable": 400, "seconds": 3.0},
        {"value": 0.5, "accuracy": 0.90, "retention": 0.6,
         "trainable": 200, "seconds": 2.0},
    ]


def test_sweep_text_lines():
    text = render_sweep("rho", _sweep_rows(), "text")
    assert "== sweep over rho ==" in text
    assert "rho=0.0: accuracy 0.9500, retention 100.0%, trainable 400" in text
    assert "rho=0.5: accuracy 0.9000, retention 60.0%, trainable 200" in text


def test_sweep_tsv_shape():
    lines = render_sweep("lambda", _sweep_rows(), "tsv").rstrip("\n").split("\n")
    assert lines[0] == "value\taccuracy\tfoundation_retention\ttrainable_params\tseconds"
    assert lines[1] == "0.0\t0.9500\t1.0000\t400\t3.00"


def test_sweep_figure_is_png(tmp_path):
    path = str(tmp_path / "sweep.png")
    write_sweep_figure("lambda", [
        {"value": 1e-4, "accuracy": 0.9, "retention": 0.7,
         "trainable": 100, "seconds": 1.0},
        {"value": 1e-2, "accuracy": 0.7, "retention": 0.5,
         "trainable": 100, "seconds": 1.0},
    ], str(tmp_path / "sweep.png"))
    with open(path, "rb") as fh:
        assert fh.read(8) == PNG_MAGIC


def test_ensure_out_dir_nested_and_idempotent(tmp_path):
    target = str(tmp_path / "a" / "b")
    assert ensure_out_dir(target) == target
    assert ensure_out_dir(target) == target
    assert os.path.isdir(target)
