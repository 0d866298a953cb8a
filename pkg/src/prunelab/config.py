"""Plain-text run configuration: one flat ``key = value`` namespace.

Lines are ``key = value`` with ``#`` comments; every key has a default, so
an empty file is a valid config.  Unknown keys and out-of-range values are
hard errors with the offending line or field named, never silently
ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List

from .data import TASK_KINDS, TaskSpec
from .errors import ConfigError
from .model import ModelConfig


@dataclass
class TrainConfig:
    total_steps: int = 400
    estimation_steps: int = 40
    batch_size: int = 32
    lr_estimation: float = 1e-2
    lr_finetune: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    rho_a: float = 0.25
    rho_f: float = 1.0 / 3.0
    rho_m: float = 0.5
    rho_r: float = 0.5
    lambda_a: float = 1e-4
    lambda_f: float = 1e-4
    peft_kind: str = "lora"
    rank: int = 8
    lora_scale: float = 2.0
    warmup_frac: float = 0.06
    seed: int = 0


_MODEL_DEFAULTS = dict(vocab_size=32, max_seq=32, embed_dim=64, num_layers=4,
                       num_heads=4, ffn_dim=128, num_classes=2, causal=False,
                       activation="gelu")
_TASK_DEFAULTS = dict(task="parity", seq_len=32, train_size=2048, eval_size=512)

_INT_KEYS = {"vocab_size", "max_seq", "embed_dim", "num_layers", "num_heads",
             "ffn_dim", "num_classes", "seq_len", "train_size", "eval_size",
             "total_steps", "estimation_steps", "batch_size", "rank", "seed"}
_FLOAT_KEYS = {"lr_estimation", "lr_finetune", "beta1", "beta2", "adam_eps",
               "weight_decay", "rho_a", "rho_f", "rho_m", "rho_r",
               "lambda_a", "lambda_f", "lora_scale", "warmup_frac"}
_BOOL_KEYS = {"causal"}
_STR_KEYS = {"task", "activation", "peft_kind"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


@dataclass
class RunConfig:
    model: ModelConfig
    task: TaskSpec
    train: TrainConfig

    def to_lines(self) -> List[str]:
        """The fully resolved configuration, one key = value per line."""
        out = []
        for name in sorted(_MODEL_DEFAULTS):
            out.append(f"{name} = {getattr(self.model, name)}")
        out.append(f"task = {self.task.kind}")
        out.append(f"seq_len = {self.task.seq_len}")
        out.append(f"train_size = {self.task.train_size}")
        out.append(f"eval_size = {self.task.eval_size}")
        for f in sorted(fields(self.train), key=lambda f: f.name):
            out.append(f"{f.name} = {getattr(self.train, f.name)}")
        return out


def build_run_config(values: Dict[str, object]) -> RunConfig:
    """Assemble and validate a RunConfig from a flat key table."""
    merged: Dict[str, object] = {}
    merged.update(_MODEL_DEFAULTS)
    merged.update(_TASK_DEFAULTS)
    for f in fields(TrainConfig):
        merged[f.name] = f.default
    for key, val in values.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = val

    for name in ("rho_a", "rho_f", "rho_m", "rho_r"):
        v = merged[name]
        if not 0 <= v < 1:
            raise ConfigError(f"{name} must be in [0, 1), got {v}")
    for name in ("lambda_a", "lambda_f", "weight_decay", "warmup_frac"):
        if merged[name] < 0:
            raise ConfigError(f"{name} must be nonnegative, got {merged[name]}")
    for name in ("lr_estimation", "lr_finetune", "lora_scale"):
        if merged[name] <= 0:
            raise ConfigError(f"{name} must be positive, got {merged[name]}")
    for name in ("total_steps", "batch_size", "rank"):
        if merged[name] < 1:
            raise ConfigError(f"{name} must be >= 1, got {merged[name]}")
    if merged["estimation_steps"] < 0:
        raise ConfigError("estimation_steps must be >= 0")
    if merged["estimation_steps"] >= merged["total_steps"]:
        raise ConfigError(
            f"estimation_steps {merged['estimation_steps']} must be below "
            f"total_steps {merged['total_steps']}")
    if merged["task"] not in TASK_KINDS:
        raise ConfigError(f"task must be one of {TASK_KINDS}, got {merged['task']!r}")
    if merged["peft_kind"] not in ("lora", "adapter"):
        raise ConfigError(f"peft_kind must be lora or adapter, got {merged['peft_kind']!r}")
    if "max_seq" not in values and merged["seq_len"] > merged["max_seq"]:
        merged["max_seq"] = merged["seq_len"]
    if merged["seq_len"] > merged["max_seq"]:
        raise ConfigError(
            f"seq_len {merged['seq_len']} exceeds max_seq {merged['max_seq']}")

    try:
        model = ModelConfig(**{k: merged[k] for k in _MODEL_DEFAULTS})
        task = TaskSpec(kind=merged["task"], vocab_size=merged["vocab_size"],
                        seq_len=merged["seq_len"], num_classes=merged["num_classes"],
                        train_size=merged["train_size"], eval_size=merged["eval_size"],
                        seed=merged["seed"] + 2)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(str(e)) from None
    train = TrainConfig(**{f.name: merged[f.name] for f in fields(TrainConfig)})
    return RunConfig(model=model, task=task, train=train)


def parse_config_text(text: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if not val:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _BOOL_KEYS:
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ValueError
                values[key] = val.lower() in ("true", "1")
            else:
                values[key] = val
        except ValueError:
            raise ConfigError(
                f"line {lineno}: bad value {val!r} for {key!r}") from None
    return values


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return build_run_config(parse_config_text(text))
