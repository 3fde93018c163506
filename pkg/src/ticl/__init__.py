"""Task-incremental continual learning with per-task tokens and feature distillation."""

from .continual import (ClassifierHead, ContinualLearner, LossBreakdown, TaskToken, TrainConfig,
                        accuracy_on, train_step)
from .data import LabeledImageSet, ScenarioSpec, StepData, make_synthetic, split_scenario
from .encoder import PRESETS, EncoderConfig, FeatureExtractor
from .metrics import AccuracyMatrix, backward_transfer, overall_accuracy, token_ablation_matrix

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "ClassifierHead", "ContinualLearner", "EncoderConfig", "FeatureExtractor",
    "LabeledImageSet", "LossBreakdown", "PRESETS", "ScenarioSpec", "StepData", "TaskToken", "TrainConfig",
    "accuracy_on", "backward_transfer", "make_synthetic", "overall_accuracy", "split_scenario",
    "token_ablation_matrix", "train_step",
]
