"""Robust image classification with shallow binary (Sobel + threshold) features."""
from .attack import AttackConfig, AttackReport, attack_sweep, fgsm
from .data import LabeledDataset, SplitSpec, load_cifar10, stratified_split, synthetic_edges
from .estimator import ChannelStandardizer, SBFMClassifier, SobelBinaryFeatures
from .model import (BackboneConfig, FusedModel, build_model, evaluate, load_checkpoint,
                    save_checkpoint, train)
from .sbfm import SBFMConfig, build_sbfm, project_kernel, threshold_forward

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackReport", "BackboneConfig", "ChannelStandardizer", "FusedModel",
    "LabeledDataset", "SBFMClassifier", "SBFMConfig", "SobelBinaryFeatures", "SplitSpec",
    "attack_sweep", "build_model", "build_sbfm", "evaluate", "fgsm", "load_checkpoint",
    "load_cifar10", "project_kernel", "save_checkpoint", "stratified_split", "synthetic_edges",
    "threshold_forward", "train",
]
