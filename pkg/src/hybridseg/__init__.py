"""Hybrid CNN/Swin-Transformer lesion segmentation with mean-teacher semi-supervision."""

from .config import (
    AugmentationSpec,
    ExperimentConfig,
    LossWeights,
    NetConfig,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
    TverskyParams,
)
from .network import HybridSegNet, build_model

__all__ = [
    "AugmentationSpec",
    "HybridSegNet",
    "ExperimentConfig",
    "LossWeights",
    "NetConfig",
    "OptimizerConfig",
    "ScheduleConfig",
    "TrainConfig",
    "TverskyParams",
    "build_model",
]
