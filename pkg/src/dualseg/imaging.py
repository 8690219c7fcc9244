"""CT volume I/O, intensity windowing, slicing and external-contour cropping."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

HU_WINDOW = (-100.0, 240.0)
CONTOUR_THRESHOLD = 77
CROP_SIZE = 376

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class NiftiError(ValueError):
    pass


class PngError(ValueError):
    pass


@dataclass
class Volume:
    """CT scan as ``D x H x W`` int16 Hounsfield units with ``(sz, sy, sx)`` mm spacing."""

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing components must be positive, got {self.spacing}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class Contour:
    """Outer border of one 8-connected foreground component.

    ``points`` is the closed border walk (row, col); ``area`` is the number of
    foreground pixels in the component; ``region`` is the component with its
    holes filled.
    """

    points: List[Tuple[int, int]]
    area: int
    region: np.ndarray = field(repr=False)

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        rows = np.flatnonzero(self.region.any(axis=1))
        cols = np.flatnonzero(self.region.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


@dataclass
class CropRecord:
    """How a slice was cropped and rescaled, so masks can follow the same path."""

    bbox: Tuple[int, int, int, int]
    src_dims: Tuple[int, int]
    uncropped: bool = False
    size: int = CROP_SIZE
    slice: Optional[int] = None

    def crop_mask(self, mask: np.ndarray) -> np.ndarray:
        """Map a source-resolution mask into the square crop frame (nearest neighbour)."""
        if tuple(mask.shape) != tuple(self.src_dims):
            raise ValueError(f"mask dims {mask.shape} do not match source dims {self.src_dims}")
        r0, c0, r1, c1 = self.bbox
        return resize_nearest(mask[r0:r1, c0:c1], self.size, self.size)

    def uncrop_mask(self, mask: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`crop_mask`: back to the source frame, zero outside the bbox."""
        if mask.shape != (self.size, self.size):
            raise ValueError(f"mask dims {mask.shape} do not match crop size {self.size}")
        r0, c0, r1, c1 = self.bbox
        out = np.zeros(self.src_dims, dtype=mask.dtype)
        out[r0:r1, c0:c1] = resize_nearest(mask, r1 - r0, c1 - c0)
        return out

    def to_json(self) -> dict:
        return {
            "slice": self.slice,
            "bbox": [int(v) for v in self.bbox],
            "src_dims": [int(v) for v in self.src_dims],
            "uncropped": bool(self.uncropped),
        }

    @classmethod
    def from_json(cls, obj: dict, size: int = CROP_SIZE) -> "CropRecord":
        return cls(tuple(obj["bbox"]), tuple(obj["src_dims"]), bool(obj["uncropped"]), size, obj.get("slice"))


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

def _nifti_header(buf: bytes, path) -> dict:
    if len(buf) < _NIFTI_HEADER_SIZE:
        raise NiftiError(f"{path}: not NIfTI-1 (header truncated)")
    magic = buf[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: not NIfTI-1 (bad magic {magic!r})")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != _NIFTI_HEADER_SIZE:
        raise NiftiError(f"{path}: only little-endian NIfTI-1 is supported")
    dim = struct.unpack_from("<8h", buf, 40)
    datatype, bitpix = struct.unpack_from("<hh", buf, 70)
    pixdim = struct.unpack_from("<8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<fff", buf, 108)
    if datatype not in _NIFTI_DTYPES:
        raise NiftiError(f"{path}: unsupported datatype {datatype}")
    ndim = dim[0]
    if ndim < 2 or ndim > 4 or (ndim == 4 and dim[4] != 1):
        raise NiftiError(f"{path}: expected a single 3-D volume, got dim {dim[:ndim + 1]}")
    shape = (dim[3] if ndim >= 3 else 1, dim[2], dim[1])
    spacing = (
        float(pixdim[3]) if ndim >= 3 and pixdim[3] > 0 else 1.0,
        float(pixdim[2]) if pixdim[2] > 0 else 1.0,
        float(pixdim[1]) if pixdim[1] > 0 else 1.0,
    )
    return {
        "magic": magic,
        "shape": shape,
        "dtype": _NIFTI_DTYPES[datatype],
        "spacing": spacing,
        "vox_offset": int(vox_offset),
        "slope": float(scl_slope),
        "inter": float(scl_inter),
    }


def _read_nifti_array(path) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    hdr = _nifti_header(buf, path)
    if hdr["magic"] == b"ni1\x00":
        img_path = os.path.splitext(os.fspath(path))[0] + ".img"
        with open(img_path, "rb") as fh:
            payload, offset = fh.read(), 0
    else:
        payload, offset = buf, hdr["vox_offset"]
    dtype = np.dtype(hdr["dtype"]).newbyteorder("<")
    count = int(np.prod(hdr["shape"]))
    if offset + count * dtype.itemsize > len(payload):
        raise NiftiError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(hdr["shape"])
    slope, inter = hdr["slope"], hdr["inter"]
    if (slope not in (0.0, 1.0)) or inter != 0.0:
        arr = arr.astype(np.float64) * (slope if slope != 0.0 else 1.0) + inter
    return arr, hdr["spacing"]


def read_nifti(path, mask_path=None) -> Tuple[Volume, Optional[np.ndarray]]:
    """Read an uncompressed little-endian NIfTI-1 volume (and optional label file).

    Float data is rounded to int16 HU.  The mask stack, when given, is returned
    as a ``D x H x W`` uint8 array of {0, 1}.
    """
    arr, spacing = _read_nifti_array(path)
    if arr.dtype.kind == "f":
        arr = np.clip(np.rint(arr), -32768, 32767)
    voxels = arr.astype(np.int16)
    masks = None
    if mask_path is not None:
        marr, _ = _read_nifti_array(mask_path)
        if marr.shape != voxels.shape:
            raise NiftiError(f"{mask_path}: mask dims {marr.shape} do not match volume {voxels.shape}")
        masks = (marr > 0).astype(np.uint8)
    return Volume(voxels, spacing), masks


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a ``D x H x W`` array as single-file NIfTI-1 (``n+1``)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("write_nifti expects a 3-D array")
    if data.dtype not in _NIFTI_CODES:
        raise NiftiError(f"unsupported dtype {data.dtype}")
    d, h, w = data.shape
    sz, sy, sx = spacing
    hdr = bytearray(_NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _NIFTI_CODES[data.dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, 352.0, 1.0, 0.0)
    struct.pack_into("<h", hdr, 252, 0)
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as fh:
        fh.write(bytes(hdr) + b"\x00" * 4 + data.astype(data.dtype.newbyteorder("<")).tobytes())


# --------------------------------------------------------------------------
# PNG
# --------------------------------------------------------------------------

def png_read(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise PngError(f"{path}: not a PNG stream")
            if im.mode != "L":
                if im.mode in ("I;16", "I;16B", "I", "1"):
                    raise PngError(f"{path}: unsupported bit depth (mode {im.mode}); 8-bit grayscale required")
                raise PngError(f"{path}: grayscale required, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except PngError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise PngError(f"{path}: malformed PNG stream ({exc})") from exc


def png_write(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise PngError("grayscale required: expected a 2-D image")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise PngError("pixel values outside 8-bit range")
        img = img.astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG")


# --------------------------------------------------------------------------
# intensity and geometry
# --------------------------------------------------------------------------

def window_to_u8(hu: np.ndarray, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> np.ndarray:
    """Clamp HU to ``[lo, hi]`` and map linearly to 0..255 (round half up)."""
    if not lo < hi:
        raise ValueError("window requires lo < hi")
    v = (np.clip(np.asarray(hu, dtype=np.float64), lo, hi) - lo) * (255.0 / (hi - lo))
    return np.floor(v + 0.5).astype(np.uint8)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = x - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D plane (half-pixel centres, no antialiasing).

    Integer inputs are rounded and clipped back to their dtype; float inputs
    come back as float64.
    """
    img = np.asarray(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate output size {out_h}x{out_w}")
    h, w = img.shape
    out = _interp_matrix(h, out_h) @ img.astype(np.float64) @ _interp_matrix(w, out_w).T
    if img.dtype.kind in "ui":
        info = np.iinfo(img.dtype)
        return np.clip(np.floor(out + 0.5), info.min, info.max).astype(img.dtype)
    return out


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate output size {out_h}x{out_w}")
    h, w = img.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[rows[:, None], cols[None, :]]


def resample_inplane(img: np.ndarray, spacing_yx: Tuple[float, float]) -> np.ndarray:
    """Resample a slice to 1 mm x 1 mm pixels."""
    sy, sx = (float(s) for s in spacing_yx)
    if sy <= 0 or sx <= 0:
        raise ValueError("spacing components must be positive")
    h, w = img.shape
    out_h, out_w = int(round(h * sy)), int(round(w * sx))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate resampled size {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return np.array(img, copy=True)
    return resize_bilinear(img, out_h, out_w)


def slice_filter(mask_stack: np.ndarray, fraction: float = 0.05) -> List[int]:
    """Indices of slices whose foreground area exceeds ``fraction`` of the largest slice area."""
    mask_stack = np.asarray(mask_stack)
    if mask_stack.ndim != 3 or mask_stack.shape[0] == 0:
        raise ValueError("mask stack must be a non-empty D x H x W array")
    areas = (mask_stack > 0).reshape(mask_stack.shape[0], -1).sum(axis=1)
    peak = areas.max()
    if peak == 0:
        return []
    return [int(i) for i in np.flatnonzero(areas > fraction * peak)]


# --------------------------------------------------------------------------
# external contours
# --------------------------------------------------------------------------

def binarize(img: np.ndarray, delta: int = CONTOUR_THRESHOLD) -> np.ndarray:
    return (np.asarray(img) >= delta).astype(np.uint8)


# Moore neighbourhood, clockwise starting west
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))


def _trace_border(comp: np.ndarray, start: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Moore-neighbour walk around a single component, starting at its raster-first pixel."""
    padded = np.pad(comp, 1)
    r, c = start[0] + 1, start[1] + 1
    # start's west neighbour is background by raster-first choice; backtrack from there
    back_dir = 0
    points = [(start[0], start[1])]
    first_move = None
    cur = (r, c)
    for _ in range(4 * comp.size + 8):
        found = False
        for k in range(1, 9):
            d = (back_dir + k) % 8
            nr, nc = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if padded[nr, nc]:
                found = True
                break
        if not found:
            return points  # isolated pixel
        nxt = (nr, nc)
        # backtrack direction: the neighbour checked just before d, seen from nxt
        pr, pc = cur[0] + _MOORE[(d - 1) % 8][0] - nr, cur[1] + _MOORE[(d - 1) % 8][1] - nc
        back_dir = _MOORE.index((pr, pc))
        if first_move is None:
            first_move = nxt
        elif cur == (r, c) and nxt == first_move:
            points.pop()
            break
        cur = nxt
        points.append((cur[0] - 1, cur[1] - 1))
    return points


def external_contours(mask: np.ndarray) -> List[Contour]:
    """Outer borders of 8-connected foreground components, ignoring holes and anything inside them."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        return []
    filled = ndimage.binary_fill_holes(mask)
    outer_labels, n_outer = ndimage.label(filled, structure=_EIGHT_CONNECTED)
    comp_labels, _ = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    comp_sizes = np.bincount(comp_labels.ravel())
    contours = []
    slices = ndimage.find_objects(outer_labels)
    for lab in range(1, n_outer + 1):
        sl = slices[lab - 1]
        region = outer_labels == lab
        sub = region[sl]
        flat = np.flatnonzero(sub)
        r, c = divmod(int(flat[0]), sub.shape[1])
        start = (r + sl[0].start, c + sl[1].start)
        comp_id = comp_labels[start]
        comp = comp_labels[sl] == comp_id
        pts = _trace_border(comp, (r, c))
        pts = [(p[0] + sl[0].start, p[1] + sl[1].start) for p in pts]
        contours.append(Contour(points=pts, area=int(comp_sizes[comp_id]), region=region))
    return contours


def abdomen_crop(img: np.ndarray, delta: int = CONTOUR_THRESHOLD, size: int = CROP_SIZE) -> Tuple[np.ndarray, CropRecord]:
    """Keep only the largest external contour's filled region, crop to it, resize to ``size``."""
    img = np.asarray(img)
    contours = external_contours(binarize(img, delta))
    if not contours:
        rec = CropRecord((0, 0) + tuple(img.shape), tuple(img.shape), uncropped=True, size=size)
        return resize_bilinear(img, size, size), rec
    best = max(contours, key=lambda ct: ct.area)
    r0, c0, r1, c1 = best.bbox
    cleaned = np.where(best.region, img, 0).astype(img.dtype)
    rec = CropRecord((r0, c0, r1, c1), tuple(img.shape), uncropped=False, size=size)
    return resize_bilinear(cleaned[r0:r1, c0:c1], size, size), rec
