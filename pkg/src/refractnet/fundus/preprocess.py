"""Quality filtering and crop/resize/normalize preprocessing of fundus rasters.

The recipe is a simple stand-in: threshold the max channel at 10/255 to find
the fundus, crop its bounding square (zero padded), bilinear-resize, then map
[0, 255] linearly to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DARK_LEVEL = 10.0
BLANK_FRACTION = 0.95
MIN_DYNAMIC_RANGE = 20.0
MIN_FUNDUS_FRACTION = 0.30
MIN_CROP_SIDE = 8


class PreprocessError(ValueError):
    """The raster cannot be preprocessed (e.g. degenerate fundus region)."""


@dataclass(frozen=True)
class QualityVerdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = QualityVerdict(True)


@dataclass(frozen=True)
class PreprocessedImage:
    """Normalized ``[3, R, R]`` pixels plus the crop square ``(x0, y0, side)`` in source pixels."""

    pixels: np.ndarray
    crop_box: tuple[int, int, int]
    source: object = None


def _check_raster(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB raster [H,W,3], got shape {image.shape}")
    return image.astype(np.float64, copy=False)


def fundus_mask(image: np.ndarray) -> np.ndarray:
    return _check_raster(image).max(axis=2) >= DARK_LEVEL


def quality_filter(image: np.ndarray) -> QualityVerdict:
    """Accept or reject an 8-bit RGB raster.

    Rejects when more than 95% of pixels are dark (``blank``), when the global
    intensity range is under 20 levels (``low dynamic range``), or when the
    bright region covers under 30% of the frame (``small fundus``).
    """
    img = _check_raster(image)
    bright = img.max(axis=2) >= DARK_LEVEL
    if 1.0 - bright.mean() > BLANK_FRACTION:
        return QualityVerdict(False, "blank")
    if img.max() - img.min() < MIN_DYNAMIC_RANGE:
        return QualityVerdict(False, "low dynamic range")
    if bright.mean() < MIN_FUNDUS_FRACTION:
        return QualityVerdict(False, "small fundus")
    return ACCEPT


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centers, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``[H,W]`` or ``[C,H,W]`` with bilinear interpolation.

    Same-size resizing returns the input values exactly.
    """
    h, w = image.shape[-2:]
    wy = _interp_matrix(out_h, h)
    wx = _interp_matrix(out_w, w)
    return wy @ image @ wx.T


def crop_square(image: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Crop the bounding square of the fundus mask, zero padding outside the frame."""
    img = _check_raster(image)
    mask = img.max(axis=2) >= DARK_LEVEL
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise PreprocessError("no fundus region above the intensity threshold")
    y0, y1, x0, x1 = rows[0], rows[-1], cols[0], cols[-1]
    h, w = y1 - y0 + 1, x1 - x0 + 1
    side = int(max(h, w))
    if side < MIN_CROP_SIDE:
        raise PreprocessError(f"fundus bounding box {w}x{h} px is smaller than {MIN_CROP_SIDE} px")
    sx = int(x0 - (side - w) // 2)
    sy = int(y0 - (side - h) // 2)
    out = np.zeros((side, side, 3))
    H, W = mask.shape
    ys, ye = max(sy, 0), min(sy + side, H)
    xs, xe = max(sx, 0), min(sx + side, W)
    out[ys - sy:ye - sy, xs - sx:xe - sx] = img[ys:ye, xs:xe]
    return out, (sx, sy, side)


def preprocess(image: np.ndarray, resolution: int, source: object = None) -> PreprocessedImage:
    """Crop, resize to ``resolution`` and normalize a raster to ``[3, R, R]`` in [-1, 1]."""
    cropped, box = crop_square(image)
    chw = cropped.transpose(2, 0, 1)
    if box[2] != resolution:
        chw = bilinear_resize(chw, resolution, resolution)
    pixels = np.clip(chw / 127.5 - 1.0, -1.0, 1.0)
    return PreprocessedImage(np.ascontiguousarray(pixels), box, source)


def to_raster(pixels: np.ndarray) -> np.ndarray:
    """Inverse of the value map: ``[3,R,R]`` in [-1,1] to a float ``[R,R,3]`` raster in [0,255]."""
    return (np.asarray(pixels).transpose(1, 2, 0) + 1.0) * 127.5
