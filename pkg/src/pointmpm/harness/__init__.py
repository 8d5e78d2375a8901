"""Orchestration: config, synthetic data, training loops, checkpoints,
metrics, and the CLI."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, preset
from .data import Dataset, GenSpec, gen_synthetic, load_dataset, write_dataset
from .metrics import MetricsWriter, read_metrics
from .optim import AdamW, cosine_lr
from .training import (NonFiniteLossError, eval_checkpoint, fewshot,
                       finetune_classify, pretrain, train_dvae)

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "Config", "ConfigError", "preset",
    "Dataset", "GenSpec", "gen_synthetic", "load_dataset", "write_dataset",
    "MetricsWriter", "read_metrics",
    "AdamW", "cosine_lr",
    "NonFiniteLossError", "eval_checkpoint", "fewshot",
    "finetune_classify", "pretrain", "train_dvae",
]
