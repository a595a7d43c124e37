"""Decode, quality-filter and preprocess manifest records into an image array."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .netpbm import read_image
from .preprocess import preprocess, quality_filter
from .records import ImageRecord

log = logging.getLogger(__name__)


@dataclass
class ImageBatch:
    """Preprocessed pixels ``[N, 3, R, R]`` aligned with ``records``."""

    pixels: np.ndarray
    records: list[ImageRecord]
    rejected: list[tuple[ImageRecord, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def targets(self, target: str) -> np.ndarray:
        return np.array([r.label.value(target) for r in self.records], dtype=np.float64)


def _load_one(root: Path, rec: ImageRecord, resolution: int):
    raster = read_image(root / rec.image_path)
    if raster.ndim != 3:
        raise ValueError(f"{rec.image_path}: expected an RGB raster")
    verdict = quality_filter(raster)
    if not verdict:
        return None, verdict.reason
    return preprocess(raster, resolution).pixels, None


def load_images(
    records: Sequence[ImageRecord],
    root: str | Path,
    resolution: int,
    workers: int = 1,
) -> ImageBatch:
    """Load records relative to ``root``; images failing the quality filter are dropped and reported."""
    root = Path(root)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda r: _load_one(root, r, resolution), records))
    else:
        results = [_load_one(root, r, resolution) for r in records]
    kept, pixels, rejected = [], [], []
    for rec, (px, reason) in zip(records, results):
        if px is None:
            rejected.append((rec, reason))
        else:
            kept.append(rec)
            pixels.append(px)
    if rejected:
        log.info("quality filter rejected %d of %d images", len(rejected), len(records))
    arr = np.stack(pixels) if pixels else np.zeros((0, 3, resolution, resolution))
    return ImageBatch(arr, kept, rejected)
