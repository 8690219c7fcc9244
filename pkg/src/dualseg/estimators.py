"""scikit-learn style wrappers around the networks and the dual-stage pipeline.

``SegmentationNet`` fits one network on ``N x C x S x S`` images.
``WaveletMultiInput`` turns ROI crops into three-channel stage-2 inputs.
``DualStageSegmenter`` chains both stages on preprocessed square frames.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import imaging, metrics
from .model import ModelConfig, MobileUNet, build_model
from .pipeline import PipelineConfig, RoiBox, crop_target, make_multi_input, stage1_infer_batch, stage1_input
from .training import TrainConfig, TrainHistory, fit
from .validation import check_frames, check_image_batch, check_mask_batch


def _train_config(cfg, seed: int) -> TrainConfig:
    if cfg is None:
        return TrainConfig(seed=seed)
    if isinstance(cfg, TrainConfig):
        return cfg
    return TrainConfig.from_dict({"seed": seed, **dict(cfg)})


class SegmentationNet(BaseEstimator):
    """One encoder-decoder network trained with the two-phase protocol.

    Parameters
    ----------
    use_mm_block : bool
        Insert Mean-Max blocks at the bottleneck and after each decoder stage.
    train_config : dict or TrainConfig, optional
        Overrides for the training schedule.
    threshold : float
        Probability at or above which a pixel is foreground.
    seed : int
        Seeds weight init and the training streams.
    """

    def __init__(self, use_mm_block: bool = False, train_config=None, threshold: float = 0.5, seed: int = 0):
        self.use_mm_block = use_mm_block
        self.train_config = train_config
        self.threshold = threshold
        self.seed = seed

    def _build(self, channels: int, size: int) -> MobileUNet:
        cfg = ModelConfig(in_channels=channels, input_size=(size, size), use_mm_block=self.use_mm_block)
        return build_model(cfg, seed=self.seed)

    def fit(self, X, y, checkpoint_path=None):
        X = check_image_batch(X)
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2:]}")
        y = check_mask_batch(y, len(X), X.shape[2:])
        self.model_ = self._build(X.shape[1], X.shape[2])
        self.history_: TrainHistory = fit(self.model_, X, y, _train_config(self.train_config, self.seed), checkpoint_path)
        self.n_channels_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: MobileUNet, threshold: float = 0.5) -> "SegmentationNet":
        """Wrap an already trained network (e.g. loaded from a checkpoint)."""
        est = cls(use_mm_block=model.config.use_mm_block, threshold=threshold)
        est.model_ = model
        est.history_ = None
        est.n_channels_ = model.config.in_channels
        return est

    def predict_proba(self, X, batch_size: int = 8) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_image_batch(X, self.n_channels_)
        out = [self.model_.predict(X[s:s + batch_size])[:, 0] for s in range(0, len(X), batch_size)]
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean per-image DSC in percent."""
        pred = self.predict(X)
        y = check_mask_batch(y, len(pred), pred.shape[1:])[:, 0]
        return float(np.mean([metrics.dsc(metrics.confusion(p, t)) for p, t in zip(pred, y)]))


class WaveletMultiInput(TransformerMixin, BaseEstimator):
    """Stateless transform: ``(frame, roi)`` pairs to ``N x 3 x S x S`` stage-2 inputs."""

    def __init__(self, size: int = 64, use_wavelet: bool = True):
        self.size = size
        self.use_wavelet = use_wavelet

    def fit(self, X=None, y=None):
        return self

    def transform(self, X, rois: Sequence[RoiBox] = None) -> np.ndarray:
        frames = check_frames(X)
        if rois is None or len(rois) != len(frames):
            raise ValueError("transform needs one ROI per frame")
        cfg = PipelineConfig(stage2_size=self.size, crop_size=frames.shape[1], use_wavelet=self.use_wavelet,
                             default_roi=(min(168, frames.shape[1]), min(229, frames.shape[1])))
        return np.stack([make_multi_input(f, r, cfg) for f, r in zip(frames, rois)])

    def fit_transform(self, X, y=None, rois=None):
        return self.fit(X, y).transform(X, rois)


class DualStageSegmenter(BaseEstimator):
    """Coarse network locates the ROI, fine network segments the wavelet multi-input.

    ``fit`` and ``predict`` take preprocessed square frames (``N x S x S``
    uint8, the abdomen-crop output) and masks in the same frame.  Stage 2 is
    trained on the ROIs stage 1 predicts for the training frames.
    """

    def __init__(self, pipeline_config=None, stage1_config=None, stage2_config=None,
                 use_mm_block: bool = True, use_wavelet: bool = True, seed: int = 0):
        self.pipeline_config = pipeline_config
        self.stage1_config = stage1_config
        self.stage2_config = stage2_config
        self.use_mm_block = use_mm_block
        self.use_wavelet = use_wavelet
        self.seed = seed

    def _pipeline_config(self) -> PipelineConfig:
        cfg = self.pipeline_config
        if cfg is None:
            cfg = PipelineConfig()
        elif not isinstance(cfg, PipelineConfig):
            cfg = PipelineConfig.from_dict(dict(cfg))
        if (cfg.use_wavelet, cfg.use_mm_block) != (self.use_wavelet, self.use_mm_block):
            cfg = PipelineConfig(**{**cfg.__dict__, "use_wavelet": self.use_wavelet, "use_mm_block": self.use_mm_block})
        return cfg

    def fit(self, X, y, stage1: Optional[SegmentationNet] = None):
        """Train both stages; pass a fitted ``stage1`` to reuse it."""
        frames = check_frames(X)
        masks = check_mask_batch(y, len(frames), frames.shape[1:])[:, 0]
        cfg = self._pipeline_config()
        if frames.shape[1] != cfg.crop_size:
            raise ValueError(f"frames must be {cfg.crop_size}x{cfg.crop_size}, got {frames.shape[1:]}")
        if stage1 is None:
            x1 = np.stack([stage1_input(f, cfg.stage1_size) for f in frames])
            y1 = np.stack([imaging.resize_nearest(m.astype(np.uint8), cfg.stage1_size, cfg.stage1_size) for m in masks])
            stage1 = SegmentationNet(use_mm_block=False, train_config=self.stage1_config,
                                     threshold=cfg.threshold, seed=self.seed).fit(x1, y1)
        check_is_fitted(stage1, "model_")
        self.stage1_ = stage1
        rois = self.extract_rois(frames)
        x2 = np.stack([make_multi_input(f, r, cfg) for f, r in zip(frames, rois)])
        y2 = np.stack([crop_target(m, r, cfg.stage2_size) for m, r in zip(masks, rois)])
        self.stage2_ = SegmentationNet(use_mm_block=self.use_mm_block, train_config=self.stage2_config,
                                       threshold=cfg.threshold, seed=self.seed + 1).fit(x2, y2)
        self.train_rois_ = rois
        return self

    def extract_rois(self, X) -> List[RoiBox]:
        check_is_fitted(self, "stage1_")
        frames = check_frames(X)
        cfg = self._pipeline_config()
        return [o.roi for o in stage1_infer_batch(self.stage1_.model_, list(frames), cfg)]

    def predict_with_rois(self, X, rois: Optional[Sequence[RoiBox]] = None):
        """(masks in the crop frame, ROIs used)."""
        check_is_fitted(self, "stage2_")
        frames = check_frames(X)
        cfg = self._pipeline_config()
        if rois is None:
            rois = self.extract_rois(frames)
        x2 = np.stack([make_multi_input(f, r, cfg) for f, r in zip(frames, rois)])
        small = self.stage2_.predict(x2)
        out = np.zeros(frames.shape, dtype=np.uint8)
        for i, (m, r) in enumerate(zip(small, rois)):
            out[i, r.r0:r.r1, r.c0:r.c1] = imaging.resize_nearest(m, r.height, r.width)
        return out, list(rois)

    def predict(self, X) -> np.ndarray:
        return self.predict_with_rois(X)[0]

    def score(self, X, y) -> float:
        """Mean per-frame DSC in percent, measured in the crop frame."""
        pred = self.predict(X)
        y = np.asarray(y)
        return float(np.mean([metrics.dsc(metrics.confusion(p, t)) for p, t in zip(pred, y)]))

    def models(self) -> Dict[str, MobileUNet]:
        check_is_fitted(self, "stage2_")
        return {"stage1": self.stage1_.model_, "stage2": self.stage2_.model_}
