"""Coarse-to-fine orchestration: preprocess, stage-1 ROI, wavelet multi-input, stage 2, reassembly."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imaging, metrics
from .imaging import CropRecord, Volume
from .model import MobileUNet
from .wavelet import detail_to_channel, vertical_details

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    stage1_size: int = 256
    stage2_size: int = 64
    crop_size: int = imaging.CROP_SIZE
    roi_pad: int = 15
    default_roi: Tuple[int, int] = (168, 229)
    threshold: float = 0.5
    contour_threshold: int = imaging.CONTOUR_THRESHOLD
    hu_window: Tuple[float, float] = imaging.HU_WINDOW
    use_wavelet: bool = True
    use_mm_block: bool = True

    def __post_init__(self):
        self.default_roi = tuple(int(v) for v in self.default_roi)
        self.hu_window = tuple(float(v) for v in self.hu_window)
        if self.stage1_size % 32 or self.stage2_size % 32:
            raise ValueError("network input sizes must be divisible by 32")
        h, w = self.default_roi
        if not (0 < h <= self.crop_size and 0 < w <= self.crop_size):
            raise ValueError("default ROI must fit inside the crop frame")

    @classmethod
    def from_dict(cls, obj: Dict) -> "PipelineConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class RoiBox:
    """Inclusive-exclusive crop rectangle in the square crop frame."""

    r0: int
    c0: int
    r1: int
    c1: int
    source: str = "predicted"

    def as_list(self) -> List[int]:
        return [self.r0, self.c0, self.r1, self.c1]

    @property
    def height(self) -> int:
        return self.r1 - self.r0

    @property
    def width(self) -> int:
        return self.c1 - self.c0


@dataclass
class StageOutput:
    prob: np.ndarray
    mask: np.ndarray
    roi: Optional[RoiBox] = None


@dataclass
class SlicePrediction:
    case: str
    slice: int
    mask: np.ndarray = field(repr=False)
    roi: RoiBox
    crop: CropRecord
    scores: Optional[Dict[str, float]] = None
    error: Optional[str] = None

    def manifest_entry(self) -> Dict:
        entry = {"case": self.case, "slice": self.slice, "roi": self.roi.as_list() if self.roi else None,
                 "roi_source": self.roi.source if self.roi else None}
        if self.scores is not None:
            entry["dsc"] = round(self.scores["dsc"], 6)
        if self.error is not None:
            entry["error"] = self.error
        return entry


# --------------------------------------------------------------------------
# per-slice steps
# --------------------------------------------------------------------------

def preprocess_slice(hu: np.ndarray, spacing_yx=(1.0, 1.0), cfg: PipelineConfig = None) -> Tuple[np.ndarray, CropRecord]:
    """Window, resample to 1 mm, external-contour crop to the square frame."""
    cfg = cfg or PipelineConfig()
    gray = imaging.window_to_u8(hu, *cfg.hu_window)
    gray = imaging.resample_inplane(gray, spacing_yx)
    return imaging.abdomen_crop(gray, cfg.contour_threshold, cfg.crop_size)


def stage1_input(img: np.ndarray, size: int) -> np.ndarray:
    """``3 x size x size`` network input: grayscale replicated to three channels."""
    small = imaging.resize_bilinear(img, size, size).astype(np.float32) / 255.0
    return np.repeat(small[None], 3, axis=0)


def stage1_infer(model: MobileUNet, img: np.ndarray, cfg: PipelineConfig = None) -> StageOutput:
    cfg = cfg or PipelineConfig()
    return stage1_infer_batch(model, [img], cfg)[0]


def stage1_infer_batch(model: MobileUNet, imgs: Sequence[np.ndarray], cfg: PipelineConfig, batch_size: int = 8) -> List[StageOutput]:
    if model is None:
        raise ValueError("stage-1 model is not built")
    outs = []
    for s in range(0, len(imgs), batch_size):
        chunk = imgs[s:s + batch_size]
        x = np.stack([stage1_input(im, cfg.stage1_size) for im in chunk])
        probs = model.predict(x)[:, 0]
        for im, p in zip(chunk, probs):
            mask = imaging.resize_nearest((p >= cfg.threshold).astype(np.uint8), *im.shape)
            out = StageOutput(prob=p, mask=mask)
            out.roi = roi_from_mask(mask, cfg)
            outs.append(out)
    return outs


def roi_from_mask(mask: np.ndarray, cfg: PipelineConfig = None) -> RoiBox:
    """Extreme foreground coordinates padded by ``roi_pad``, or the centred default box."""
    cfg = cfg or PipelineConfig()
    size = cfg.crop_size
    mask = np.asarray(mask)
    if mask.shape != (size, size):
        raise ValueError(f"ROI mask must be {size}x{size}, got {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        h, w = cfg.default_roi
        r0, c0 = (size - h) // 2, (size - w) // 2
        return RoiBox(r0, c0, r0 + h, c0 + w, "default")
    cols = np.flatnonzero(mask.any(axis=0))
    p = cfg.roi_pad
    return RoiBox(
        max(0, int(rows[0]) - p),
        max(0, int(cols[0]) - p),
        min(size, int(rows[-1]) + p + 1),
        min(size, int(cols[-1]) + p + 1),
        "predicted",
    )


def make_multi_input(img: np.ndarray, roi: RoiBox, cfg: PipelineConfig = None) -> np.ndarray:
    """``3 x S x S`` float32: ROI crop in [0, 1] plus level-1/level-2 vertical details."""
    cfg = cfg or PipelineConfig()
    if roi.height < 1 or roi.width < 1:
        raise ValueError(f"degenerate ROI {roi}")
    s = cfg.stage2_size
    crop = imaging.resize_bilinear(img[roi.r0:roi.r1, roi.c0:roi.c1], s, s)
    out = np.zeros((3, s, s), dtype=np.float32)
    out[0] = crop.astype(np.float32) / 255.0
    if cfg.use_wavelet:
        v1, v2 = vertical_details(crop.astype(np.float64))
        out[1] = detail_to_channel(v1, s)
        out[2] = detail_to_channel(v2, s)
    return out


def crop_target(mask: np.ndarray, roi: RoiBox, size: int) -> np.ndarray:
    return imaging.resize_nearest(np.asarray(mask)[roi.r0:roi.r1, roi.c0:roi.c1], size, size)


def stage2_infer(model: MobileUNet, multi: np.ndarray, threshold: float = 0.5) -> StageOutput:
    if model is None:
        raise ValueError("stage-2 model is not built")
    prob = model.predict(np.asarray(multi)[None])[0, 0]
    return StageOutput(prob=prob, mask=(prob >= threshold).astype(np.uint8))


def reassemble(mask_small: np.ndarray, roi: RoiBox, rec: CropRecord, out_dims: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Paste a stage-2 mask back into the crop frame, then undo the abdomen crop.

    ``out_dims`` (original slice dims) undoes in-plane resampling when it differs
    from the crop record's source dims.
    """
    if not (0 <= roi.r0 < roi.r1 <= rec.size and 0 <= roi.c0 < roi.c1 <= rec.size):
        raise ValueError(f"ROI {roi} inconsistent with crop frame {rec.size}")
    frame = np.zeros((rec.size, rec.size), dtype=np.uint8)
    frame[roi.r0:roi.r1, roi.c0:roi.c1] = imaging.resize_nearest(np.asarray(mask_small, dtype=np.uint8), roi.height, roi.width)
    full = rec.uncrop_mask(frame)
    if out_dims is not None and tuple(out_dims) != tuple(full.shape):
        full = imaging.resize_nearest(full, *out_dims)
    return full


# --------------------------------------------------------------------------
# whole-volume runs
# --------------------------------------------------------------------------

def prepare_case(volume: Volume, masks: Optional[np.ndarray], cfg: PipelineConfig, slices: Optional[Sequence[int]] = None):
    """Preprocess the retained slices of one case.

    Returns a list of ``(index, img376, crop_record, gt_original, gt376)``; the
    ground-truth entries are ``None`` without masks.
    """
    if slices is None:
        slices = imaging.slice_filter(masks) if masks is not None else range(volume.dims[0])
    spacing_yx = volume.spacing[1:]
    out = []
    for z in slices:
        img, rec = preprocess_slice(volume.voxels[z], spacing_yx, cfg)
        rec.slice = int(z)
        gt = gt376 = None
        if masks is not None:
            gt = masks[z].astype(np.uint8)
            res = imaging.resize_nearest(gt, *rec.src_dims) if gt.shape != rec.src_dims else gt
            gt376 = rec.crop_mask(res)
        out.append((int(z), img, rec, gt, gt376))
    return out


def run_pipeline(
    volume: Volume,
    masks: Optional[np.ndarray],
    stage1: MobileUNet,
    stage2: MobileUNet,
    cfg: PipelineConfig = None,
    case_id: str = "case",
) -> Tuple[List[SlicePrediction], Optional[Dict]]:
    """Run both stages on every retained slice; score against ``masks`` when given."""
    cfg = cfg or PipelineConfig()
    prepared = prepare_case(volume, masks, cfg)
    preds = infer_prepared(prepared, stage1, stage2, cfg, case_id, volume.voxels.shape[1:])
    report = None
    if masks is not None:
        scored = [p.scores for p in preds if p.scores is not None]
        report = metrics.aggregate(scored) if scored else None
    return preds, report


def infer_prepared(prepared, stage1: MobileUNet, stage2: MobileUNet, cfg: PipelineConfig, case_id: str,
                   out_dims: Tuple[int, int], rois: Optional[Sequence[RoiBox]] = None) -> List[SlicePrediction]:
    """Both stages over the output of ``prepare_case``; per-slice failures are recorded, not raised.

    ``rois`` skips stage 1 (the boxes must line up with ``prepared``).
    """
    preds: List[SlicePrediction] = []
    if not prepared:
        return preds
    if rois is None:
        rois = [o.roi for o in stage1_infer_batch(stage1, [p[1] for p in prepared], cfg)]
    for (z, img, rec, gt, _), roi in zip(prepared, rois):
        try:
            multi = make_multi_input(img, roi, cfg)
            out2 = stage2_infer(stage2, multi, cfg.threshold)
            full = reassemble(out2.mask, roi, rec, out_dims)
            scores = metrics.score(full, gt) if gt is not None else None
            preds.append(SlicePrediction(case_id, z, full, roi, rec, scores))
        except (ValueError, FloatingPointError) as exc:
            logger.warning("case %s slice %d failed: %s", case_id, z, exc)
            empty = np.zeros(tuple(out_dims), dtype=np.uint8)
            preds.append(SlicePrediction(case_id, z, empty, roi, rec, None, str(exc)))
    return preds


def write_predictions(preds: Sequence[SlicePrediction], out_dir) -> Path:
    """One PNG per slice plus ``predictions.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in preds:
        imaging.png_write(out / f"{p.case}_{p.slice:04d}.png", (p.mask > 0).astype(np.uint8) * 255)
        entries.append(p.manifest_entry())
    path = out / "predictions.json"
    path.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return path


def case_scores(preds: Sequence[SlicePrediction], gts: Dict[Tuple[str, int], np.ndarray]) -> List[Dict[str, float]]:
    """Per-case scores from the confusion counts pooled over each case's slices."""
    by_case: Dict[str, List[SlicePrediction]] = {}
    for p in preds:
        by_case.setdefault(p.case, []).append(p)
    out = []
    for case in sorted(by_case):
        items = by_case[case]
        pred = np.stack([p.mask for p in items])
        gt = np.stack([gts[(case, p.slice)] for p in items])
        out.append(metrics.score(pred, gt))
    return out
