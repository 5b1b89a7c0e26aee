"""Bilateral masked-autoencoder class-incremental learning.

A two-branch masked autoencoder that jointly classifies and reconstructs,
stores past-task exemplars as raw image patches under a byte budget, and
regenerates images from those patches for replay when later tasks train.
"""

from .data import TaskStream, load_cifar100, synthetic_shapes
from .engine import (
    TrainConfig,
    cosine_lr,
    evaluate,
    reconstruct_old_samples,
    run_experiment,
    train_task,
)
from .frequency import freq_mask, high_pass, ifft_to_real, lowpass_removal_mask
from .losses import LossReport, LossWeights, loss_cls, loss_det, loss_rec, total_loss
from .metrics import (
    MetricsLedger,
    avg_accuracy,
    emit_reports,
    feature_density,
    forgetting,
    last_accuracy,
)
from .model import BilateralMAE, ModelConfig
from .patches import (
    MaskPlan,
    PatchGrid,
    PatchSet,
    decode_exemplar,
    dequantize,
    encode_exemplar,
    paste_patches,
    patchify,
    quantize,
    sample_mask,
    unpatchify,
)
from .store import ExemplarStore, candidate_selection, inspect_store, load_store

__version__ = "0.1.0"

__all__ = [
    "BilateralMAE",
    "ExemplarStore",
    "LossReport",
    "LossWeights",
    "MaskPlan",
    "MetricsLedger",
    "ModelConfig",
    "PatchGrid",
    "PatchSet",
    "TaskStream",
    "TrainConfig",
    "avg_accuracy",
    "candidate_selection",
    "cosine_lr",
    "decode_exemplar",
    "emit_reports",
    "encode_exemplar",
    "evaluate",
    "feature_density",
    "forgetting",
    "freq_mask",
    "high_pass",
    "ifft_to_real",
    "inspect_store",
    "last_accuracy",
    "load_cifar100",
    "load_store",
    "loss_cls",
    "loss_det",
    "loss_rec",
    "lowpass_removal_mask",
    "paste_patches",
    "patchify",
    "quantize",
    "reconstruct_old_samples",
    "run_experiment",
    "sample_mask",
    "synthetic_shapes",
    "total_loss",
    "train_task",
    "dequantize",
    "unpatchify",
]
