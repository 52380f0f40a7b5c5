"""Skeletal action recognition with four-way partition attention.

A numpy-backed implementation of a skeletal-temporal transformer: joint and
frame partition transforms, partition-specific multi-head attention with
Kronecker positional bias, a joint/temporal outer-product embedding,
augmentation and training utilities, and exact attention-complexity
accounting.
"""

from .attention import FlopsReport, count_flops, skate_msa
from .model import (ModelConfig, ModelParams, init_params, label_smoothed_ce,
                    load_checkpoint, model_forward, save_checkpoint)
from .partition import (ALL_TYPES, PartitionLayout, SkateType, build_layout,
                        partition, reverse)
from .skeldata import (Dataset, ModalityKind, SkeletonSequence,
                       generate_synthetic, load_dataset, save_dataset)
from .tensor import GradTape, Tensor
from .trainer import OptimConfig, evaluate, train_model

__version__ = "0.1.0"

__all__ = [
    "ALL_TYPES", "Dataset", "FlopsReport", "GradTape", "ModalityKind",
    "ModelConfig", "ModelParams", "OptimConfig", "PartitionLayout",
    "SkateType", "SkeletonSequence", "Tensor", "build_layout", "count_flops",
    "evaluate", "generate_synthetic", "init_params", "label_smoothed_ce",
    "load_checkpoint", "load_dataset", "model_forward", "partition",
    "reverse", "save_checkpoint", "save_dataset", "skate_msa", "train_model",
]
