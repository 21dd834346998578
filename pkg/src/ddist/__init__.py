"""Dataset distillation by backpropagation through inner training runs."""

from ddist.data import DatasetSplit, make_synthetic
from ddist.driver import (DistillationConfig, DistilledDataset, History,
                          init_distilled, load_checkpoint, run_distillation,
                          save_checkpoint)
from ddist.estimators import UnrollConfig, WindowSample, meta_gradient
from ddist.evaluation import EvalConfig, evaluate_distilled
from ddist.models import ArchitectureSpec
from ddist.optim import InnerOptConfig

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "DatasetSplit",
    "DistillationConfig",
    "DistilledDataset",
    "EvalConfig",
    "History",
    "InnerOptConfig",
    "UnrollConfig",
    "WindowSample",
    "evaluate_distilled",
    "init_distilled",
    "load_checkpoint",
    "make_synthetic",
    "meta_gradient",
    "run_distillation",
    "save_checkpoint",
]
