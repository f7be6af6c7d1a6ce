"""Masked-image pre-training with mix-supervised contrastive fine-tuning.

A desk-scale library and CLI: stage 1 reconstructs masked patches of general
images with a small ViT; stage 2 fine-tunes on a labeled set with soft-target
cross-entropy plus a contrastive loss whose positives come from mixed-label
distances.
"""

from .core import (
    ContractViolation,
    Image,
    LabeledSample,
    MultiviewBatch,
    NoPositivesError,
    NumericFault,
    RandomSource,
    SoftLabel,
    ValidationError,
    label_distance,
    validate_soft_label,
)
from .backbone import Checkpoint, EncoderConfig, Network
from .losses import LossConfig
from .mixing import MixPolicy, PairMask
from .trainer import EvalResult, RunReport, TrainConfig, evaluate, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ContractViolation",
    "EncoderConfig",
    "EvalResult",
    "Image",
    "LabeledSample",
    "LossConfig",
    "MixPolicy",
    "MultiviewBatch",
    "Network",
    "NoPositivesError",
    "NumericFault",
    "PairMask",
    "RandomSource",
    "RunReport",
    "SoftLabel",
    "TrainConfig",
    "ValidationError",
    "evaluate",
    "finetune",
    "label_distance",
    "pretrain",
    "validate_soft_label",
    "__version__",
]
