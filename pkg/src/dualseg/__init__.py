"""Dual-stage CT segmentation: a coarse network finds the ROI, a fine network with
Mean-Max attention segments a wavelet-augmented crop of it."""

from .estimators import DualStageSegmenter, SegmentationNet, WaveletMultiInput
from .model import ModelConfig, build_model, load_checkpoint, param_count, save_checkpoint
from .pipeline import PipelineConfig, run_pipeline
from .training import TrainConfig, fit, make_folds

__version__ = "0.1.0"

__all__ = [
    "DualStageSegmenter",
    "ModelConfig",
    "PipelineConfig",
    "SegmentationNet",
    "TrainConfig",
    "WaveletMultiInput",
    "build_model",
    "fit",
    "load_checkpoint",
    "make_folds",
    "param_count",
    "run_pipeline",
    "save_checkpoint",
]
