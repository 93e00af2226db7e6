"""Momentum-anchored multi-scale fusion on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import ConfigError, CorruptionError, DimensionError, InputError, MamsError, NumericalError, UsageError
from .tensor import Tensor, no_grad
from .model import ModelConfig, ModelGraph, build_model, count_params, estimate_flops, forward_full, full_width_config
from .momentum import EmaState, ema_closed_form, ema_state_for, ema_update, verify_unrolled_approximation
from .losses import LossConfig, asymmetric_loss, bce_with_logits
from .metrics import EvalReport, aggregate_runs, roc_auc
from .data import Dataset, SynthConfig, generate_synthetic, ingest_chestxray14, split
from .training import TrainConfig, evaluate, run_ablation, run_cell, train
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ConfigError", "CorruptionError", "DimensionError", "InputError", "MamsError", "NumericalError", "UsageError",
    "Tensor", "no_grad",
    "ModelConfig", "ModelGraph", "build_model", "count_params", "estimate_flops", "forward_full", "full_width_config",
    "EmaState", "ema_closed_form", "ema_state_for", "ema_update", "verify_unrolled_approximation",
    "LossConfig", "asymmetric_loss", "bce_with_logits",
    "EvalReport", "aggregate_runs", "roc_auc",
    "Dataset", "SynthConfig", "generate_synthetic", "ingest_chestxray14", "split",
    "TrainConfig", "evaluate", "run_ablation", "run_cell", "train",
    "load_checkpoint", "save_checkpoint",
]
