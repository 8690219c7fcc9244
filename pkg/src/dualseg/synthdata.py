"""Seeded abdominal phantoms with ground-truth target masks.

Each slice has an elliptical abdomen on an air background, a bright organ,
a bony disk, a detached bright arc below the body (a stand-in for the scanner
table), and a small lobulated target blob whose mean intensity is only a few
HU above the surrounding tissue.  The blob carries a fine column-wise texture
so its edges and interior show up in vertical-detail wavelet bands.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .imaging import Volume, write_nifti

AIR_HU = -1000.0
HU_RANGE = (-1000.0, 400.0)


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: Tuple[int, int, int] = (6, 128, 128)
    # abdomen ellipse: centre (row, col) and semi-axes (rows, cols) in pixels
    abdomen_center: Tuple[float, float] = (60.0, 64.0)
    abdomen_axes: Tuple[float, float] = (42.0, 56.0)
    tissue_hu: float = 55.0
    # target blob
    blob_center: Tuple[float, float] = (70.0, 70.0)
    blob_drift: Tuple[float, float] = (1.0, 0.5)
    blob_radius: Tuple[float, float] = (8.0, 16.0)
    blob_contrast_hu: float = 12.0
    texture_hu: float = 18.0
    texture_period: float = 3.0
    # bright arc below the body
    arc_gap: float = 6.0
    arc_hu: float = 380.0
    noise_sigma: float = 6.0
    spacing: Tuple[float, float, float] = (2.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"invalid phantom dims {self.dims}")
        lo, hi = self.blob_radius
        if not 0 < lo <= hi:
            raise ValueError("blob radius range must satisfy 0 < min <= max")
        if abs(self.blob_contrast_hu) > 15:
            raise ValueError("blob contrast must stay within 15 HU of the surrounding tissue")
        d = self.dims[0]
        for z in range(d):
            cy, cx = self._blob_center(z)
            r = hi * 1.3 + 1.0  # lobulation bound
            if _ellipse_value(cy, cx, self.abdomen_center, self.abdomen_axes, pad=r) > 1.0:
                raise ValueError("target blob does not fit inside the abdomen ellipse")

    def _blob_center(self, z: int) -> Tuple[float, float]:
        mid = (self.dims[0] - 1) / 2
        return (self.blob_center[0] + self.blob_drift[0] * (z - mid), self.blob_center[1] + self.blob_drift[1] * (z - mid))

    def _blob_radius(self, z: int) -> float:
        d = self.dims[0]
        if d == 1:
            return self.blob_radius[1]
        t = abs(z - (d - 1) / 2) / ((d - 1) / 2)
        lo, hi = self.blob_radius
        return hi - (hi - lo) * t ** 2

    @classmethod
    def random(cls, rng: np.random.Generator, seed: int, dims=(6, 128, 128)) -> "PhantomSpec":
        """Draw a plausible per-case geometry."""
        d, h, w = dims
        ay = rng.uniform(0.30, 0.36) * h
        ax = rng.uniform(0.38, 0.44) * w
        cy = h * 0.47 + rng.uniform(-3, 3)
        cx = w * 0.5 + rng.uniform(-4, 4)
        # radii are set for 128-px frames; smaller frames scale them down
        scale = min(1.0, min(h, w) / 128)
        rmax = rng.uniform(12.0, 18.0)
        rmin = rng.uniform(8.0, min(11.0, rmax))
        rmax, rmin = rmax * scale, rmin * scale
        # keep the blob well inside the body
        by = cy + rng.uniform(-0.25, 0.3) * ay
        bx = cx + rng.uniform(-0.3, 0.3) * ax
        return cls(
            seed=seed,
            dims=(d, h, w),
            abdomen_center=(cy, cx),
            abdomen_axes=(ay, ax),
            tissue_hu=rng.uniform(45.0, 65.0),
            blob_center=(by, bx),
            blob_drift=(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)),
            blob_radius=(rmin, rmax),
            blob_contrast_hu=rng.uniform(10.0, 15.0),
            arc_gap=rng.uniform(4.0, 8.0),
        )


def _ellipse_value(y, x, center, axes, pad: float = 0.0):
    return ((y - center[0]) / (axes[0] - pad)) ** 2 + ((x - center[1]) / (axes[1] - pad)) ** 2


def ellipse_bbox(center, axes, shape) -> Tuple[int, int, int, int]:
    """Exclusive-bound bbox of the pixel centres inside the ellipse."""
    h, w = shape
    r0 = max(0, int(np.ceil(center[0] - axes[0])))
    r1 = min(h, int(np.floor(center[0] + axes[0])) + 1)
    c0 = max(0, int(np.ceil(center[1] - axes[1])))
    c1 = min(w, int(np.floor(center[1] + axes[1])) + 1)
    return r0, c0, r1, c1


def _smooth_field(rng: np.random.Generator, shape, amplitude: float) -> np.ndarray:
    coarse = rng.standard_normal((6, 6))
    from .imaging import resize_bilinear

    return resize_bilinear(coarse, *shape) * amplitude


def gen_phantom(spec: PhantomSpec) -> Tuple[Volume, np.ndarray]:
    """Synthesize a ``D x H x W`` int16 HU volume and its uint8 target masks."""
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    body = _ellipse_value(yy, xx, spec.abdomen_center, spec.abdomen_axes) <= 1.0
    cy, cx = spec.abdomen_center
    ay, ax = spec.abdomen_axes

    # organ (brighter, large) and spine (bone) inside the body
    organ_c = (cy - 0.35 * ay, cx - 0.35 * ax)
    organ = _ellipse_value(yy, xx, organ_c, (0.35 * ay, 0.4 * ax)) <= 1.0
    spine = _ellipse_value(yy, xx, (cy + 0.7 * ay, cx), (0.12 * ay, 0.12 * ay)) <= 1.0

    # table arc: ring segment under the body, detached by arc_gap
    ring = np.sqrt(((yy - cy) / (ay + spec.arc_gap)) ** 2 + ((xx - cx) / (ax + spec.arc_gap)) ** 2)
    arc = (ring >= 1.0) & (ring <= 1.0 + 3.0 / ay) & (yy > cy + 0.55 * ay)

    phases = rng.uniform(0, 2 * np.pi, size=2)
    tissue_var = _smooth_field(rng, (h, w), 4.0)
    vol = np.empty((d, h, w), dtype=np.float64)
    masks = np.zeros((d, h, w), dtype=np.uint8)
    for z in range(d):
        by, bx = spec._blob_center(z)
        radius = spec._blob_radius(z)
        theta = np.arctan2(yy - by, xx - bx)
        lobed = radius * (1 + 0.15 * np.sin(2 * theta + phases[0]) + 0.1 * np.sin(3 * theta + phases[1]))
        blob = np.hypot(yy - by, xx - bx) <= lobed
        blob &= body & ~organ & ~spine

        s = np.full((h, w), AIR_HU)
        s[body] = spec.tissue_hu + tissue_var[body]
        s[organ] = spec.tissue_hu + 45.0
        s[spine] = 300.0
        texture = spec.texture_hu * np.cos(2 * np.pi * xx / spec.texture_period + phases[0])
        s[blob] = spec.tissue_hu + spec.blob_contrast_hu + tissue_var[blob] + texture[blob]
        s[arc] = spec.arc_hu
        s += rng.normal(0.0, spec.noise_sigma, size=(h, w)) * (body | arc)
        vol[z] = s
        masks[z] = blob
    vol = np.clip(np.rint(vol), *HU_RANGE).astype(np.int16)
    return Volume(vol, spec.spacing), masks


def case_spec(seed: int, index: int, dims=(6, 128, 128)) -> PhantomSpec:
    rng = np.random.default_rng([seed, index])
    return PhantomSpec.random(rng, seed=int(rng.integers(0, 2**63 - 1)), dims=dims)


def gen_corpus(n_cases: int, seed: int, out_dir, dims=(6, 128, 128)) -> Path:
    """Write ``n_cases`` phantom cases and ``manifest.json`` under ``out_dir``."""
    if n_cases < 4:
        raise ValueError("need at least 4 cases for 4-fold cross-validation")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n_cases):
        cid = f"case_{i:03d}"
        vol, masks = gen_phantom(case_spec(seed, i, dims))
        case_dir = out / cid
        case_dir.mkdir(exist_ok=True)
        write_nifti(case_dir / "volume.nii", vol.voxels, vol.spacing)
        write_nifti(case_dir / "mask.nii", masks, vol.spacing)
        cases.append({"id": cid, "volume_path": f"{cid}/volume.nii", "mask_path": f"{cid}/mask.nii"})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"seed": seed, "cases": cases}, indent=2) + "\n")
    return manifest


def load_manifest(path) -> Dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    obj = json.loads(path.read_text())
    root = path.parent
    for case in obj["cases"]:
        case["volume_path"] = str(root / case["volume_path"])
        case["mask_path"] = str(root / case["mask_path"])
    return obj
