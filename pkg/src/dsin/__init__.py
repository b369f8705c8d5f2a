"""Patch-based multi-label detection with fusion and recurrent structure inference."""

from .data import Dataset, SyntheticSpec, generate_synthetic_dataset, load_manifest, save_manifest
from .evaluation import f1_frame, label_stats, tune_thresholds
from .model import DSINModel, ModelConfig
from .structure import SIParams, si_unroll
from .tensor import Tensor, backward
from .training import TrainConfig, load_checkpoint, save_checkpoint, staged_train

__version__ = "0.1.0"
