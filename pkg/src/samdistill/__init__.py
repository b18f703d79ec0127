"""Semantic-prior distillation for image restoration, at desk scale.

A mask-consuming refiner (teacher) is trained alongside a plain residual
restorer (student); image-level and relation-level losses pull the student
toward the teacher, and only the student is used at inference.
"""

from .config import ConfigError, TrainConfig, load_config
from .core import MaskSet, ShapeError, psnr, ssim
from .data import DegradationSpec, generate_dataset, make_splits
from .distill import PerceptualConfig, PerceptualExtractor, relation_matrix, sgr_loss, smooth_l1, spd_sgr_losses
from .estimator import DistilledRestorer
from .models import BaselineIR, BaselineIRConfig, Refiner, RefinerConfig, SPFUnit, SPFUnitConfig
from .segmenter import SegmenterConfig, canonicalize, make_segmenter, segment
from .train import Checkpoint, TrainLogRecord, evaluate, train, train_step

__version__ = "0.1.0"

__all__ = [
    "BaselineIR",
    "BaselineIRConfig",
    "Checkpoint",
    "ConfigError",
    "DegradationSpec",
    "DistilledRestorer",
    "MaskSet",
    "PerceptualConfig",
    "PerceptualExtractor",
    "Refiner",
    "RefinerConfig",
    "SPFUnit",
    "SPFUnitConfig",
    "SegmenterConfig",
    "ShapeError",
    "TrainConfig",
    "TrainLogRecord",
    "canonicalize",
    "evaluate",
    "generate_dataset",
    "load_config",
    "make_segmenter",
    "make_splits",
    "psnr",
    "relation_matrix",
    "segment",
    "sgr_loss",
    "smooth_l1",
    "spd_sgr_losses",
    "ssim",
    "train",
    "train_step",
]
