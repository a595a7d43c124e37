"""Refraction labels, image records and the manifest CSV."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_HEADER = (
    "image_path",
    "patient_id",
    "eye",
    "visit",
    "cohort",
    "split",
    "sphere_d",
    "cylinder_d",
    "se_d",
    "has_amd",
    "had_cataract_surgery",
)
SPLITS = ("train", "tune", "validation")
EYES = ("L", "R")
TARGETS = ("se", "sphere", "cylinder")
SE_BOUND_D = 25.0
SE_TOLERANCE_D = 1e-9

# tune share of each cohort's development set
DEFAULT_TUNE_FRACTIONS = {"biobank-like": 0.10, "areds-like": 0.11}


class ManifestError(ValueError):
    """A manifest row or the manifest as a whole is invalid."""


def spherical_equivalent(sphere_d: float, cylinder_d: float) -> float:
    """Spherical equivalent in diopters: sphere + cylinder / 2."""
    if not (math.isfinite(sphere_d) and math.isfinite(cylinder_d)):
        raise ValueError(f"non-finite refraction: sphere={sphere_d}, cylinder={cylinder_d}")
    return sphere_d + 0.5 * cylinder_d


@dataclass(frozen=True)
class RefractionLabel:
    se_d: float
    sphere_d: float | None = None
    cylinder_d: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.se_d) or abs(self.se_d) > SE_BOUND_D:
            raise ValueError(f"spherical equivalent {self.se_d} outside [-{SE_BOUND_D}, {SE_BOUND_D}] D")
        if self.sphere_d is not None and self.cylinder_d is not None:
            expected = spherical_equivalent(self.sphere_d, self.cylinder_d)
            if abs(self.se_d - expected) >= SE_TOLERANCE_D:
                raise ValueError(
                    f"se_d={self.se_d} inconsistent with sphere {self.sphere_d} + 0.5 * cylinder {self.cylinder_d}"
                )

    def value(self, target: str) -> float | None:
        if target == "se":
            return self.se_d
        if target == "sphere":
            return self.sphere_d
        if target == "cylinder":
            return self.cylinder_d
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    patient_id: str
    eye: str
    visit: int
    cohort: str
    split: str
    label: RefractionLabel
    has_amd: bool | None = None
    had_cataract_surgery: bool | None = None


def _parse_float(text: str, column: str) -> float | None:
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"{column}={text!r} is not a number") from None
    if not math.isfinite(value):
        raise ValueError(f"{column}={text!r} is not finite")
    return value


_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


def _parse_bool(text: str, column: str) -> bool | None:
    low = text.strip().lower()
    if low == "":
        return None
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"{column}={text!r} is not a boolean")


def _format_float(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _format_bool(value: bool | None) -> str:
    return "" if value is None else ("true" if value else "false")


def parse_row(row: dict[str, str]) -> ImageRecord:
    eye = row["eye"].strip()
    if eye not in EYES:
        raise ValueError(f"eye={eye!r} must be L or R")
    split = row["split"].strip()
    if split not in SPLITS:
        raise ValueError(f"split={split!r} must be one of {SPLITS}")
    try:
        visit = int(row["visit"])
    except ValueError:
        raise ValueError(f"visit={row['visit']!r} is not an integer") from None
    if visit < 0:
        raise ValueError(f"visit={visit} is negative")
    if not row["image_path"] or not row["patient_id"]:
        raise ValueError("image_path and patient_id are required")

    sphere = _parse_float(row["sphere_d"], "sphere_d")
    cylinder = _parse_float(row["cylinder_d"], "cylinder_d")
    se = _parse_float(row["se_d"], "se_d")
    if se is None:
        if sphere is None or cylinder is None:
            raise ValueError("se_d is blank and cannot be derived without both sphere_d and cylinder_d")
        se = spherical_equivalent(sphere, cylinder)
    return ImageRecord(
        image_path=row["image_path"],
        patient_id=row["patient_id"],
        eye=eye,
        visit=visit,
        cohort=row["cohort"],
        split=split,
        label=RefractionLabel(se_d=se, sphere_d=sphere, cylinder_d=cylinder),
        has_amd=_parse_bool(row["has_amd"], "has_amd"),
        had_cataract_surgery=_parse_bool(row["had_cataract_surgery"], "had_cataract_surgery"),
    )


def check_patient_splits(records: Iterable[ImageRecord]) -> None:
    """Raise if any patient has records in more than one split."""
    seen: dict[str, str] = {}
    for rec in records:
        prev = seen.setdefault(rec.patient_id, rec.split)
        if prev != rec.split:
            raise ManifestError(f"patient {rec.patient_id!r} appears in both {prev!r} and {rec.split!r} splits")


def load_manifest(path: str | Path) -> list[ImageRecord]:
    """Read and validate a manifest CSV.

    Raises:
        ManifestError: on a bad header, a malformed row (message carries the
            1-based line number), or a patient spanning two splits.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be exactly {','.join(MANIFEST_HEADER)}")
        records = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{line}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            try:
                records.append(parse_row(dict(zip(MANIFEST_HEADER, row))))
            except ValueError as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from None
    check_patient_splits(records)
    return records


def manifest_text(records: Sequence[ImageRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in records:
        writer.writerow([
            r.image_path,
            r.patient_id,
            r.eye,
            r.visit,
            r.cohort,
            r.split,
            _format_float(r.label.sphere_d),
            _format_float(r.label.cylinder_d),
            _format_float(r.label.se_d),
            _format_bool(r.has_amd),
            _format_bool(r.had_cataract_surgery),
        ])
    return buf.getvalue()


def write_manifest(records: Sequence[ImageRecord], path: str | Path) -> None:
    check_patient_splits(records)
    Path(path).write_text(manifest_text(records), encoding="utf-8")


def by_split(records: Iterable[ImageRecord], split: str) -> list[ImageRecord]:
    return [r for r in records if r.split == split]


def split_development(
    records: Sequence[ImageRecord],
    tune_fractions: dict[str, float] | None = None,
    default_fraction: float = 0.10,
    seed: int = 0,
) -> list[ImageRecord]:
    """Reassign train/tune at patient level, separately within each cohort.

    Validation records pass through untouched. For every cohort, a random
    ``round(fraction * n_patients)`` of its development patients go to tune.
    """
    fractions = dict(DEFAULT_TUNE_FRACTIONS if tune_fractions is None else tune_fractions)
    dev_patients: dict[str, list[str]] = {}
    for r in records:
        if r.split != "validation":
            ids = dev_patients.setdefault(r.cohort, [])
            if r.patient_id not in ids:
                ids.append(r.patient_id)
    tune_ids: set[str] = set()
    for k, cohort in enumerate(sorted(dev_patients)):
        ids = sorted(dev_patients[cohort])
        frac = fractions.get(cohort, default_fraction)
        if not 0.0 <= frac < 1.0:
            raise ValueError(f"tune fraction {frac} for cohort {cohort!r} must be in [0, 1)")
        rng = np.random.default_rng([seed, k])
        n_tune = int(round(frac * len(ids)))
        tune_ids.update(ids[i] for i in rng.permutation(len(ids))[:n_tune])
    out = []
    for r in records:
        if r.split == "validation":
            out.append(r)
        else:
            out.append(replace(r, split="tune" if r.patient_id in tune_ids else "train"))
    check_patient_splits(out)
    return out
