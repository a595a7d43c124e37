"""Synthetic fundus photographs with a planted refractive-error signal.

Each frame shows a dark-bordered circular fundus with vignetting, an optic disc
on the nasal side, 2-4 vessel arcs and a dark foveal blob. Blob radius and
darkness are affine in the spherical equivalent, so the label is recoverable
from the fovea alone. Vessels are kept out of the region around the fovea.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import encode_ppm
from .records import ImageRecord, RefractionLabel, manifest_text

SE_RANGE_D = (-8.0, 6.0)
CYLINDER_RANGE_D = (-2.0, 0.0)
SPLIT_PREFIX = {"train": "TR", "tune": "TU", "validation": "VA"}
CORRUPTIONS = ("blank", "flat", "small")
LANDMARK_FIELDS = (
    "image_path", "frame_size", "fundus_x", "fundus_y", "fundus_radius",
    "fovea_x", "fovea_y", "fovea_radius", "fovea_gain", "disc_x", "disc_y", "corruption",
)


@dataclass(frozen=True)
class FundusStyle:
    """Rendering constants. Lengths are in units of the fundus radius."""

    retina_rgb: tuple[float, float, float] = (170.0, 85.0, 40.0)
    vignette: float = 0.35
    disc_rgb: tuple[float, float, float] = (240.0, 200.0, 140.0)
    drusen_rgb: tuple[float, float, float] = (225.0, 190.0, 90.0)
    vessel_darkening: float = 0.45
    vessel_clear_radius: float = 0.35
    fovea_radius_base: float = 0.16
    fovea_radius_slope: float = -0.008
    fovea_gain_base: float = 0.45
    fovea_gain_slope: float = 0.025
    fovea_jitter: float = 0.25
    noise_sigma: float = 2.0

    def fovea_radius(self, se_d: float) -> float:
        return self.fovea_radius_base + self.fovea_radius_slope * se_d

    def fovea_gain(self, se_d: float) -> float:
        return self.fovea_gain_base + self.fovea_gain_slope * se_d


@dataclass
class FundusGeometry:
    """Planted geometry in continuous frame coordinates (pixel (i, j) centered at (j+.5, i+.5))."""

    frame_size: int
    fundus_x: float
    fundus_y: float
    fundus_radius: float
    fovea_x: float
    fovea_y: float
    fovea_radius: float
    fovea_gain: float
    disc_x: float
    disc_y: float
    disc_axes: tuple[float, float]
    vessels: list[np.ndarray] = field(default_factory=list)
    vessel_width: float = 1.0
    drusen: list[tuple[float, float, float]] = field(default_factory=list)


def frame_size_for(resolution: int) -> int:
    return int(round(1.5 * resolution))


def sample_geometry(
    rng: np.random.Generator,
    resolution: int,
    se_d: float,
    eye: str,
    has_amd: bool = False,
    style: FundusStyle = FundusStyle(),
) -> FundusGeometry:
    size = frame_size_for(resolution)
    rho = 0.6 * resolution * rng.uniform(0.95, 1.05)
    lo, hi = rho + 1.0, size - rho - 1.0
    cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
    fx = cx + rng.uniform(-1, 1) * style.fovea_jitter * rho
    fy = cy + rng.uniform(-1, 1) * style.fovea_jitter * rho
    nasal = 1.0 if eye == "R" else -1.0
    dx, dy = fx + nasal * 0.5 * rho, fy - 0.04 * rho
    disc = np.array([dx, dy])
    fovea = np.array([fx, fy])

    vessels = []
    n_vessels = int(rng.integers(2, 5))
    for k in range(n_vessels):
        vert = 1.0 if k % 2 == 0 else -1.0
        j = rng.uniform(-0.06, 0.06, size=(3, 2)) * rho
        if k < 2:
            # temporal arcades around the fovea
            p1 = disc + np.array([-nasal * 0.05, vert * 0.35]) * rho + j[0]
            p2 = fovea + np.array([-nasal * 0.10, vert * 0.55]) * rho + j[1]
            p3 = fovea + np.array([-nasal * 0.70, vert * 0.50]) * rho + j[2]
        else:
            p1 = disc + np.array([nasal * 0.15, vert * 0.20]) * rho + j[0]
            p2 = disc + np.array([nasal * 0.30, vert * 0.45]) * rho + j[1]
            p3 = disc + np.array([nasal * 0.40, vert * 0.80]) * rho + j[2]
        vessels.append(np.stack([disc, p1, p2, p3]))

    drusen = []
    if has_amd:
        for _ in range(int(rng.integers(4, 9))):
            ang = rng.uniform(0, 2 * math.pi)
            r = rng.uniform(0.25, 0.34) * rho
            drusen.append((fx + r * math.cos(ang), fy + r * math.sin(ang), 0.03 * rho * rng.uniform(0.8, 1.3)))

    return FundusGeometry(
        frame_size=size,
        fundus_x=cx,
        fundus_y=cy,
        fundus_radius=rho,
        fovea_x=fx,
        fovea_y=fy,
        fovea_radius=style.fovea_radius(se_d) * rho,
        fovea_gain=style.fovea_gain(se_d),
        disc_x=dx,
        disc_y=dy,
        disc_axes=(0.085 * rho, 0.10 * rho),
        vessels=vessels,
        vessel_width=0.025 * rho * rng.uniform(0.8, 1.2),
        drusen=drusen,
    )


def _bezier(ctrl: np.ndarray, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _disc_coverage(d: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def render_fundus(
    geom: FundusGeometry,
    style: FundusStyle = FundusStyle(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render the geometry to a uint8 ``[S, S, 3]`` raster; ``rng=None`` renders noiselessly."""
    size = geom.frame_size
    coords = np.arange(size) + 0.5
    xx, yy = np.meshgrid(coords, coords)
    rho = geom.fundus_radius

    d_center = np.hypot(xx - geom.fundus_x, yy - geom.fundus_y)
    inside = _disc_coverage(d_center, rho)
    shade = 1.0 - style.vignette * np.minimum(d_center / rho, 1.0) ** 2
    img = shade[..., None] * np.asarray(style.retina_rgb)

    ax, ay = geom.disc_axes
    e = np.hypot((xx - geom.disc_x) / ax, (yy - geom.disc_y) / ay)
    cov = np.clip((1.0 - e) * min(ax, ay) + 0.5, 0.0, 1.0)[..., None]
    img = img * (1 - cov) + cov * np.asarray(style.disc_rgb)

    vessel = np.zeros((size, size))
    w = geom.vessel_width
    for ctrl in geom.vessels:
        pts = _bezier(ctrl, 120)
        x0, y0 = np.floor(pts.min(axis=0) - 4 * w).astype(int)
        x1, y1 = np.ceil(pts.max(axis=0) + 4 * w).astype(int)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, size), min(y1, size)
        if x0 >= x1 or y0 >= y1:
            continue
        px = xx[y0:y1, x0:x1].reshape(-1, 1)
        py = yy[y0:y1, x0:x1].reshape(-1, 1)
        d2 = ((px - pts[:, 0]) ** 2 + (py - pts[:, 1]) ** 2).min(axis=1)
        prof = np.exp(-d2 / (2 * w * w)).reshape(y1 - y0, x1 - x0)
        np.maximum(vessel[y0:y1, x0:x1], prof, out=vessel[y0:y1, x0:x1])
    d_fovea = np.hypot(xx - geom.fovea_x, yy - geom.fovea_y)
    clear = style.vessel_clear_radius * rho
    vessel *= np.clip((d_fovea - clear) / (0.1 * rho), 0.0, 1.0)
    img = img * (1.0 - style.vessel_darkening * vessel)[..., None]

    for (qx, qy, qr) in geom.drusen:
        cov = 0.7 * _disc_coverage(np.hypot(xx - qx, yy - qy), qr)[..., None]
        img = img * (1 - cov) + cov * np.asarray(style.drusen_rgb)

    fov = _disc_coverage(d_fovea, geom.fovea_radius)
    img = img * (1.0 - (1.0 - geom.fovea_gain) * fov)[..., None]

    if rng is not None and style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    img = img * inside[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_corrupted(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Deliberately poor frames that the quality filter should reject."""
    if kind == "blank":
        img = rng.integers(0, 6, size=(size, size, 3))
    elif kind == "flat":
        img = np.full((size, size, 3), 128)
    elif kind == "small":
        coords = np.arange(size) + 0.5
        xx, yy = np.meshgrid(coords, coords)
        cov = _disc_coverage(np.hypot(xx - size / 2, yy - size / 2), 0.2 * size)
        img = cov[..., None] * np.array([170.0, 85.0, 40.0])
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SyntheticDataset:
    root: Path
    manifest_path: Path
    records: list[ImageRecord]
    landmarks: list[dict]


def _split_plan(n_train: int, n_tune: int, n_val: int):
    for split, n in (("train", n_train), ("tune", n_tune), ("validation", n_val)):
        for j in range(n):
            yield split, j


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_train: int,
    n_tune: int,
    n_val: int,
    resolution: int = 64,
    seed: int = 0,
    areds_fraction: float = 0.5,
    corrupt_fraction: float = 0.0,
    style: FundusStyle = FundusStyle(),
) -> SyntheticDataset:
    """Write ``images/*.ppm``, ``manifest.csv`` and ``landmarks.csv`` under ``out_dir``.

    Two consecutive images (left eye, then right eye) share one patient id, so
    splits are patient-disjoint by construction. Areds-like patients carry
    only the spherical equivalent plus AMD / cataract-surgery flags; AMD eyes
    get drusen around the macula.
    """
    if min(n_train, n_tune, n_val) < 0:
        raise ValueError("split sizes must be non-negative")
    if resolution < 32:
        raise ValueError(f"resolution must be >= 32, got {resolution}")
    if not 0.0 <= corrupt_fraction <= 1.0 or not 0.0 <= areds_fraction <= 1.0:
        raise ValueError("fractions must lie in [0, 1]")

    root = Path(out_dir)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    records: list[ImageRecord] = []
    landmarks: list[dict] = []
    patient_rng: dict[str, dict] = {}
    size = frame_size_for(resolution)
    for index, (split, j) in enumerate(_split_plan(n_train, n_tune, n_val)):
        patient = f"{SPLIT_PREFIX[split]}{j // 2:05d}"
        eye = "L" if j % 2 == 0 else "R"
        if patient not in patient_rng:
            prng = np.random.default_rng([seed, 1, index])
            areds = bool(prng.uniform() < areds_fraction)
            patient_rng[patient] = {
                "cohort": "areds-like" if areds else "biobank-like",
                "has_amd": bool(prng.uniform() < 0.3) if areds else None,
                "cataract": bool(prng.uniform() < 0.25) if areds else False,
            }
        info = patient_rng[patient]
        rng = np.random.default_rng([seed, 0, index])
        se = float(rng.uniform(*SE_RANGE_D))
        cyl = float(rng.uniform(*CYLINDER_RANGE_D))
        sphere = se - 0.5 * cyl
        if info["cohort"] == "areds-like":
            label = RefractionLabel(se_d=se)
        else:
            label = RefractionLabel(se_d=se, sphere_d=sphere, cylinder_d=cyl)
        geom = sample_geometry(rng, resolution, se, eye, bool(info["has_amd"]), style)
        corruption = ""
        if corrupt_fraction > 0 and rng.uniform() < corrupt_fraction:
            corruption = CORRUPTIONS[int(rng.integers(len(CORRUPTIONS)))]
            raster = render_corrupted(corruption, size, rng)
        else:
            raster = render_fundus(geom, style, rng)

        rel = f"images/img_{index:05d}.ppm"
        (root / rel).write_bytes(encode_ppm(raster))
        records.append(ImageRecord(
            image_path=rel,
            patient_id=patient,
            eye=eye,
            visit=0,
            cohort=info["cohort"],
            split=split,
            label=label,
            has_amd=info["has_amd"],
            had_cataract_surgery=info["cataract"],
        ))
        lm = {k: v for k, v in asdict(geom).items() if k in LANDMARK_FIELDS}
        lm.update(image_path=rel, corruption=corruption)
        landmarks.append(lm)

    manifest_path = root / "manifest.csv"
    manifest_path.write_text(manifest_text(records), encoding="utf-8")
    with (root / "landmarks.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LANDMARK_FIELDS, lineterminator="\n")
        writer.writeheader()
        for lm in landmarks:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in lm.items()})
    return SyntheticDataset(root, manifest_path, records, landmarks)


def load_landmarks(path: str | Path) -> dict[str, dict]:
    """Read ``landmarks.csv`` keyed by image path."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k in ("image_path", "corruption"):
                    parsed[k] = v
                elif k == "frame_size":
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            out[row["image_path"]] = parsed
    return out
