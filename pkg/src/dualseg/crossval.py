"""Patient-level k-fold cross-validation of the dual-stage pipeline and its ablations."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import imaging, metrics
from .estimators import DualStageSegmenter, SegmentationNet
from .pipeline import PipelineConfig, case_scores, infer_prepared, prepare_case, stage1_input
from .synthdata import load_manifest
from .training import TrainConfig, make_folds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    use_mm_block: bool = True
    use_wavelet: bool = True


FULL = Variant("full", True, True)
NO_MM_BLOCK = Variant("no_mm_block", False, True)
NO_WAVELET = Variant("no_wavelet", True, False)
DEFAULT_VARIANTS = (FULL, NO_MM_BLOCK, NO_WAVELET)


@dataclass
class CaseData:
    case_id: str
    slice_dims: tuple
    prepared: list

    @property
    def gts(self) -> Dict[tuple, np.ndarray]:
        return {(self.case_id, z): gt for z, _, _, gt, _ in self.prepared}


def load_cases(manifest, cfg: PipelineConfig) -> Dict[str, CaseData]:
    """Read and preprocess every case listed in a corpus manifest (retained slices only)."""
    obj = load_manifest(manifest)
    cases = {}
    for entry in obj["cases"]:
        vol, masks = imaging.read_nifti(entry["volume_path"], entry["mask_path"])
        prepared = prepare_case(vol, masks, cfg)
        cases[entry["id"]] = CaseData(entry["id"], tuple(vol.voxels.shape[1:]), prepared)
    return cases


def _frames(cases: Sequence[CaseData]):
    imgs = [p[1] for c in cases for p in c.prepared]
    gts = [p[4] for c in cases for p in c.prepared]
    return np.stack(imgs), np.stack(gts)


def train_stage1(frames: np.ndarray, masks: np.ndarray, cfg: PipelineConfig, train_cfg: TrainConfig, seed: int) -> SegmentationNet:
    x = np.stack([stage1_input(f, cfg.stage1_size) for f in frames])
    y = np.stack([imaging.resize_nearest(m.astype(np.uint8), cfg.stage1_size, cfg.stage1_size) for m in masks])
    return SegmentationNet(use_mm_block=False, train_config=train_cfg, threshold=cfg.threshold, seed=seed).fit(x, y)


def _summaries(preds, cases: Sequence[CaseData]) -> Dict:
    per_slice = [p.scores for p in preds if p.scores is not None]
    gts = {}
    for c in cases:
        gts.update(c.gts)
    return {
        "per_slice": metrics.aggregate(per_slice),
        "per_case": metrics.aggregate(case_scores([p for p in preds if p.scores is not None], gts)),
        "failed_slices": sum(p.error is not None for p in preds),
    }


def cross_validate(
    manifest,
    k: int = 4,
    seed: int = 0,
    pipeline_cfg: Optional[PipelineConfig] = None,
    stage1_cfg: Optional[TrainConfig] = None,
    stage2_cfg: Optional[TrainConfig] = None,
    variants: Sequence[Variant] = DEFAULT_VARIANTS,
    cases: Optional[Dict[str, CaseData]] = None,
) -> Dict:
    """Train and test every variant on every fold; stage 1 is shared by the variants of a fold.

    Returns ``{"folds": [...], "aggregate": {variant: {"per_slice", "per_case"}}, ...}``
    where the aggregate pools the test slices (or cases) of all folds.
    """
    cfg = pipeline_cfg or PipelineConfig()
    stage1_cfg = stage1_cfg or TrainConfig(seed=seed)
    stage2_cfg = stage2_cfg or TrainConfig(seed=seed)
    if cases is None:
        cases = load_cases(manifest, cfg)
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")
    split = make_folds(sorted(cases), k, seed)

    folds: List[Dict] = []
    pooled = {v.name: [] for v in variants}
    start = time.perf_counter()
    for i in range(split.k):
        train_ids, test_ids = split.split(i)
        train_cases = [cases[c] for c in train_ids]
        test_cases = [cases[c] for c in test_ids]
        frames, masks = _frames(train_cases)
        fold_seed = seed * 100 + i
        s1 = train_stage1(frames, masks, cfg, stage1_cfg, fold_seed)
        record = {"fold": i, "train": train_ids, "test": test_ids, "results": {}}
        for v in variants:
            seg = DualStageSegmenter(pipeline_config=cfg, stage2_config=stage2_cfg,
                                     use_mm_block=v.use_mm_block, use_wavelet=v.use_wavelet, seed=fold_seed)
            seg.fit(frames, masks, stage1=s1)
            vcfg = seg._pipeline_config()
            preds = []
            for c in test_cases:
                preds += infer_prepared(c.prepared, s1.model_, seg.stage2_.model_, vcfg, c.case_id, c.slice_dims)
            pooled[v.name] += preds
            record["results"][v.name] = _summaries(preds, test_cases)
            logger.info("fold %d %s dsc=%.2f (%.0fs)", i, v.name,
                        record["results"][v.name]["per_slice"]["dsc"]["mean"], time.perf_counter() - start)
        folds.append(record)

    return {
        "k": split.k,
        "seed": seed,
        "variants": [asdict(v) for v in variants],
        "pipeline_config": asdict(cfg),
        "stage1_config": asdict(stage1_cfg),
        "stage2_config": asdict(stage2_cfg),
        "folds": folds,
        "aggregate": {name: _summaries(pooled[name], list(cases.values())) for name in names},
    }
