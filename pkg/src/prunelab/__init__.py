"""Desk-scale laboratory for early structured pruning of a frozen
transformer and its low-rank fine-tuning modules."""

from .config import RunConfig, TrainConfig, load_config
from .data import TaskSpec, generate
from .masks import MaskPenaltyConfig, MaskSet
from .model import FoundationModel, ModelConfig
from .peft import PeftModule, PeftSet, attach_estimation_set
from .pipeline import RunReport, evaluate, run_all
from .plan import PruningPlan

__all__ = [
    "RunConfig", "TrainConfig", "load_config",
    "TaskSpec", "generate",
    "MaskPenaltyConfig", "MaskSet",
    "FoundationModel", "ModelConfig",
    "PeftModule", "PeftSet", "attach_estimation_set",
    "RunReport", "evaluate", "run_all",
    "PruningPlan",
]

__version__ = "0.1.0"
