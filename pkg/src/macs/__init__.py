"""Confidence-stratified training of an SPD-manifold attention encoder under label noise."""

from .data import FormatError, FragmentSet, SynthSpec, inject_noise, read_archive, synthesize, write_archive
from .diffcore import NumericalError
from .evaluate import fragment_metrics, subject_ensemble, youden_threshold
from .trainer import ModelParams, TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "FormatError", "FragmentSet", "ModelParams", "NumericalError", "SynthSpec", "TrainConfig", "Trainer",
    "fragment_metrics", "inject_noise", "load_checkpoint", "read_archive", "save_checkpoint",
    "subject_ensemble", "synthesize", "train", "write_archive", "youden_threshold",
]
