"""Attention heatmaps: extraction, cohort aggregation by (eye, SE band), rendering."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fundus.netpbm import encode_pgm, encode_ppm
from .model import AttentionResNet

log = logging.getLogger(__name__)

MASS_TOL = 1e-6


@dataclass(frozen=True)
class SEBand:
    """A diopter interval; each end is open or closed."""

    name: str
    low: float = -np.inf
    high: float = np.inf
    low_closed: bool = False
    high_closed: bool = False

    def contains(self, se_d: float) -> bool:
        above = se_d >= self.low if self.low_closed else se_d > self.low
        below = se_d <= self.high if self.high_closed else se_d < self.high
        return above and below


# mean-map bands, and the wider neutral band used for individual examples
AGGREGATE_BANDS = (
    SEBand("severe-myopia", high=-6.0),
    SEBand("neutral", -0.5, 0.5, True, True),
    SEBand("severe-hyperopia", low=5.0),
)
EXAMPLE_BANDS = (
    SEBand("myopia", high=-6.0),
    SEBand("neutral", -1.0, 1.0, True, True),
    SEBand("hyperopia", low=5.0),
)


def _intervals_overlap(a: SEBand, b: SEBand) -> bool:
    lo, hi = (a, b) if a.low <= b.low else (b, a)
    if hi.low < lo.high:
        return True
    return hi.low == lo.high and hi.low_closed and lo.high_closed


def check_bands(bands: Sequence[SEBand]) -> None:
    names = [b.name for b in bands]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate band names in {names}")
    for i, a in enumerate(bands):
        for b in bands[i + 1:]:
            if _intervals_overlap(a, b):
                raise ValueError(f"bands {a.name!r} and {b.name!r} overlap")


def band_of(se_d: float, bands: Sequence[SEBand]) -> str | None:
    for b in bands:
        if b.contains(se_d):
            return b.name
    return None


@dataclass
class HeatmapImage:
    grid: np.ndarray
    normalized: bool = True
    provenance: dict = field(default_factory=dict)

    @property
    def mass(self) -> float:
        return float(self.grid.sum())


def _cell_interp(n_cells: int, resolution: int) -> np.ndarray:
    """``[resolution, n_cells]`` linear interpolation from cell receptive-field centers to pixels.

    Every convolution in the network is 3x3 with padding 1 (or 1x1 without
    padding), so output cell ``j`` of a stride-``s`` layer is centered on input
    index ``s * j``. Cell ``j`` of the final grid therefore looks at pixel
    ``S * j`` for total stride ``S`` -- not at the middle of its ``S``-pixel
    tile, which plain image resizing would assume. Pixels beyond the outermost
    centers take the edge value.
    """
    stride = resolution / n_cells
    t = np.clip(np.arange(resolution) / stride, 0.0, n_cells - 1)
    lo = np.floor(t).astype(int)
    hi = np.minimum(lo + 1, n_cells - 1)
    frac = t - lo
    m = np.zeros((resolution, n_cells))
    np.add.at(m, (np.arange(resolution), lo), 1.0 - frac)
    np.add.at(m, (np.arange(resolution), hi), frac)
    return m


def upsample_attention(weights: np.ndarray, resolution: int) -> np.ndarray:
    """Linearly interpolate a unit-mass attention grid to ``resolution``² and renormalize to unit mass.

    Interpolation nodes sit at each cell's receptive-field center (see
    ``_cell_interp``), so a heatmap peak lands on the input pixels the cell
    actually sees.
    """
    total = weights.sum()
    if not np.all(weights >= 0) or abs(total - 1.0) > MASS_TOL:
        raise ValueError(f"attention weights must be non-negative with unit mass (mass={total})")
    rows = _cell_interp(weights.shape[0], resolution)
    cols = _cell_interp(weights.shape[1], resolution)
    up = np.clip(rows @ weights @ cols.T, 0.0, None)
    return up / up.sum()


def extract_heatmaps(
    models: Sequence[AttentionResNet],
    pixels: np.ndarray,
    provenance: Sequence[dict] | None = None,
) -> list[HeatmapImage]:
    """Heatmaps for preprocessed images ``pixels[N, 3, R, R]``.

    With several models the attention grids are averaged before upsampling.
    """
    if not models:
        raise ValueError("need at least one model")
    if pixels.ndim == 3:
        pixels = pixels[None]
    grids = np.mean([m.attention_maps(pixels) for m in models], axis=0)
    r = pixels.shape[-1]
    model_ids = [f"{m.config.target}-seed{m.config.seed}" for m in models]
    out = []
    for i, g in enumerate(grids):
        prov = {"models": model_ids}
        if provenance is not None:
            prov.update(provenance[i])
        out.append(HeatmapImage(upsample_attention(g, r), True, prov))
    return out


def extract_heatmap(model: AttentionResNet, image: np.ndarray, provenance: dict | None = None) -> HeatmapImage:
    return extract_heatmaps([model], image, None if provenance is None else [provenance])[0]


def center_of_mass(grid: np.ndarray) -> tuple[float, float]:
    """``(x, y)`` of the mass center in pixel units; pixel ``(i, j)`` is centered at ``(j + .5, i + .5)``."""
    h, w = grid.shape
    total = grid.sum()
    x = float((grid.sum(axis=0) * (np.arange(w) + 0.5)).sum() / total)
    y = float((grid.sum(axis=1) * (np.arange(h) + 0.5)).sum() / total)
    return x, y


@dataclass
class Atlas:
    groups: dict[tuple[str, str], HeatmapImage]
    counts: dict[tuple[str, str], int]
    absent: list[tuple[str, str]]
    out_of_band: int
    warnings: list[str]


def mean_map(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise mean, reduced over per-pixel sorted values with a running mean.

    The result does not depend on the order of ``maps``, and a group of
    identical maps reproduces that map exactly.
    """
    stack = np.sort(np.stack(maps), axis=0)
    out = stack[0].copy()
    for i in range(1, stack.shape[0]):
        out += (stack[i] - out) / (i + 1)
    return out


def aggregate_maps(
    heatmaps: Iterable[HeatmapImage],
    eyes: Sequence[str],
    se_values: Sequence[float],
    bands: Sequence[SEBand] = AGGREGATE_BANDS,
    min_count: int = 100,
    mirror: bool = False,
) -> Atlas:
    """Pixelwise mean heatmap per ``(eye, band)`` group.

    Groups with fewer than ``min_count`` maps are listed as absent. With
    ``mirror`` the left-eye maps are flipped horizontally and pooled with the
    right eyes under eye ``"both"``.
    """
    check_bands(bands)
    members: dict[tuple[str, str], list[np.ndarray]] = {}
    out_of_band = 0
    for hm, eye, se in zip(heatmaps, eyes, se_values, strict=True):
        band = band_of(se, bands)
        if band is None:
            out_of_band += 1
            continue
        grid = hm.grid
        if mirror:
            grid = grid[:, ::-1] if eye == "L" else grid
            eye = "both"
        members.setdefault((eye, band), []).append(grid)

    eye_keys = ["both"] if mirror else ["L", "R"]
    groups, counts, absent = {}, {}, []
    for eye in eye_keys:
        for b in bands:
            key = (eye, b.name)
            maps = members.get(key, [])
            counts[key] = len(maps)
            if len(maps) >= min_count and maps:
                groups[key] = HeatmapImage(mean_map(maps), True, {"eye": eye, "band": b.name, "count": len(maps)})
            else:
                absent.append(key)
    warnings = []
    if not groups:
        warnings.append(f"no (eye, band) group reached min_count={min_count}")
        log.warning(warnings[-1])
    return Atlas(groups, counts, absent, out_of_band, warnings)


def heatmap_to_gray(grid: np.ndarray) -> np.ndarray:
    """Scale by the maximum to 8-bit gray."""
    peak = grid.max()
    if not np.all(np.isfinite(grid)) or peak <= 0:
        raise ValueError("heatmap must be finite with a positive maximum")
    return np.clip(np.rint(grid / peak * 255.0), 0, 255).astype(np.uint8)


def overlay(gray: np.ndarray, underlay: np.ndarray) -> np.ndarray:
    """50% blend of the underlay with the heatmap carried in the green channel."""
    heat = np.zeros(gray.shape + (3,))
    heat[..., 1] = gray
    return np.clip(np.rint(0.5 * underlay.astype(np.float64) + 0.5 * heat), 0, 255).astype(np.uint8)


def heatmap_csv(grid: np.ndarray, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in grid]
    return "\n".join(lines) + "\n"


def read_heatmap_csv(path: str | Path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.array([[float(v) for v in row.split(",")] for row in rows])


def render(
    heatmap: HeatmapImage,
    out_stem: str | Path,
    underlay: np.ndarray | None = None,
    annotation: str | None = None,
) -> list[Path]:
    """Write ``<stem>.pgm``, plus ``<stem>.ppm`` with an underlay and ``<stem>.txt`` with an annotation."""
    stem = Path(out_stem)
    gray = heatmap_to_gray(heatmap.grid)
    paths = [stem.with_suffix(".pgm")]
    paths[0].write_bytes(encode_pgm(gray))
    if underlay is not None:
        if underlay.shape[:2] != gray.shape:
            raise ValueError(f"underlay {underlay.shape} does not match heatmap {gray.shape}")
        paths.append(stem.with_suffix(".ppm"))
        paths[-1].write_bytes(encode_ppm(overlay(gray, underlay)))
    if annotation is not None:
        paths.append(stem.with_suffix(".txt"))
        paths[-1].write_text(annotation.rstrip("\n") + "\n")
    return paths


def write_atlas(atlas: Atlas, out_dir: str | Path) -> Path:
    """Write ``<out>/atlas/<eye>/<band>/mean.{pgm,csv}`` and ``<out>/atlas/summary.json``."""
    root = Path(out_dir) / "atlas"
    root.mkdir(parents=True, exist_ok=True)
    for (eye, band), hm in sorted(atlas.groups.items()):
        d = root / eye / band
        d.mkdir(parents=True, exist_ok=True)
        render(hm, d / "mean")
        (d / "mean.csv").write_text(heatmap_csv(hm.grid))
    summary = {
        "groups": [
            {"eye": e, "band": b, "count": atlas.counts[(e, b)], "present": (e, b) in atlas.groups}
            for (e, b) in atlas.counts
        ],
        "out_of_band": atlas.out_of_band,
        "warnings": atlas.warnings,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return root
