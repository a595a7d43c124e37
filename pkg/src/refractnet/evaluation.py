"""Validation reports: point metrics with bootstrap CIs, margin tests and record slices."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import stats
from .fundus.loader import ImageBatch
from .fundus.records import ImageRecord
from .model import AttentionResNet, ensemble_predict

log = logging.getLogger(__name__)

DEFAULT_MARGINS = (0.5, 1.0, 2.0)

Predicate = Callable[[ImageRecord], bool]

SLICES: dict[str, Predicate] = {
    "all": lambda r: True,
    "no_amd": lambda r: r.has_amd is False,
    "no_cataract_surgery": lambda r: r.had_cataract_surgery is False,
    "no_amd_no_cataract_surgery": lambda r: r.has_amd is False and r.had_cataract_surgery is False,
    "cohort=biobank-like": lambda r: r.cohort == "biobank-like",
    "cohort=areds-like": lambda r: r.cohort == "areds-like",
}


class EvaluationError(ValueError):
    """The prediction set cannot be evaluated (e.g. it is empty)."""


@dataclass
class PredictionSet:
    predicted: np.ndarray
    actual: np.ndarray
    records: list[ImageRecord] | None = None

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).ravel()
        self.actual = np.asarray(self.actual, dtype=np.float64).ravel()
        if self.predicted.shape != self.actual.shape:
            raise EvaluationError("predicted and actual differ in length")
        if self.records is not None and len(self.records) != self.predicted.size:
            raise EvaluationError("records do not align with predictions")
        if not (np.all(np.isfinite(self.predicted)) and np.all(np.isfinite(self.actual))):
            raise EvaluationError("prediction set contains non-finite values")

    def __len__(self) -> int:
        return int(self.predicted.size)

    def rows(self) -> np.ndarray:
        return np.stack([self.predicted, self.actual], axis=1)

    def subset(self, predicate: Predicate) -> "PredictionSet":
        if self.records is None:
            raise EvaluationError("slicing needs records")
        keep = [i for i, r in enumerate(self.records) if predicate(r)]
        return PredictionSet(self.predicted[keep], self.actual[keep], [self.records[i] for i in keep])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("image_path,actual_d,predicted_d\n")
        paths = [r.image_path for r in self.records] if self.records else [""] * len(self)
        for path, a, p in zip(paths, self.actual, self.predicted):
            buf.write(f"{path},{float(a)!r},{float(p)!r}\n")
        return buf.getvalue()


@dataclass
class MarginRecord:
    margin: float
    model_acc: float
    baseline_acc: float
    p_value: float


@dataclass
class EvalReport:
    n: int
    mae: stats.BootstrapCI
    r2: stats.BootstrapCI | None
    baseline_mae: stats.BootstrapCI
    margins: list[MarginRecord]
    slices: dict[str, "EvalReport | None"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def ci(c):
            return None if c is None else {"point": c.point, "ci": [c.lower, c.upper]}
        return {
            "n": self.n,
            "mae": ci(self.mae),
            "r2": ci(self.r2),
            "baseline_mae": ci(self.baseline_mae),
            "margins": [
                {"margin": m.margin, "model_acc": m.model_acc, "baseline_acc": m.baseline_acc, "p_value": m.p_value}
                for m in self.margins
            ],
            "slices": {k: (None if v is None else v.to_dict()) for k, v in self.slices.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary(self) -> str:
        lines = [f"n = {self.n}",
                 f"MAE {self.mae.point:.3f} D [{self.mae.lower:.3f}, {self.mae.upper:.3f}]",
                 f"baseline MAE {self.baseline_mae.point:.3f} D "
                 f"[{self.baseline_mae.lower:.3f}, {self.baseline_mae.upper:.3f}]"]
        if self.r2 is not None:
            lines.append(f"R2 {self.r2.point:.3f} [{self.r2.lower:.3f}, {self.r2.upper:.3f}]")
        lines.append("margin  model  baseline  p-value")
        for m in self.margins:
            lines.append(f"+-{m.margin:<4g}  {m.model_acc:5.1%}  {m.baseline_acc:7.1%}  {m.p_value:.3g}")
        for name, sub in self.slices.items():
            lines.append(f"slice {name}: " + ("absent" if sub is None else
                                              f"n={sub.n}, MAE {sub.mae.point:.3f} D"))
        return "\n".join(lines)


def evaluate_predictions(
    preds: PredictionSet,
    margins: Sequence[float] = DEFAULT_MARGINS,
    slices: Mapping[str, Predicate] | None = None,
    n_resamples: int = stats.N_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Full report for a prediction set; every bootstrap uses the same resample indices.

    A slice with no records, or on which the report is undefined, is recorded
    as absent (``None``).
    """
    if len(preds) == 0:
        raise EvaluationError("empty prediction set")
    rows = preds.rows()
    boot = dict(n_resamples=n_resamples, seed=seed, workers=workers)
    mae_ci = stats.bootstrap_ci(stats.pair_metric(stats.mae), rows, **boot)
    base_ci = stats.bootstrap_ci(lambda r: stats.baseline_mae(r[:, 1]), rows, **boot)
    try:
        r2_ci = stats.bootstrap_ci(stats.pair_metric(stats.r_squared), rows, **boot)
    except stats.StatsError as exc:
        log.warning("R2 unavailable: %s", exc)
        r2_ci = None

    records = []
    for m in margins:
        acc = stats.margin_accuracy(preds.predicted, preds.actual, m)
        base = stats.sliding_window_baseline(preds.actual, m)
        k = int(np.sum(np.abs(preds.predicted - preds.actual) <= m))
        # a baseline of 1 is a degenerate null under which every outcome has P(X >= k) = 1
        p = stats.binomial_test_one_tailed(k, len(preds), base) if base < 1.0 else 1.0
        records.append(MarginRecord(float(m), acc, base, p))

    sub_reports: dict[str, EvalReport | None] = {}
    for name, pred in (slices or {}).items():
        part = preds.subset(pred)
        if len(part) == 0:
            sub_reports[name] = None
            continue
        try:
            sub_reports[name] = evaluate_predictions(part, margins, None, n_resamples, seed, workers)
        except stats.StatsError as exc:
            log.warning("slice %s: %s", name, exc)
            sub_reports[name] = None
    return EvalReport(len(preds), mae_ci, r2_ci, base_ci, records, sub_reports)


def predict_batch(models: Sequence[AttentionResNet], batch: ImageBatch) -> PredictionSet:
    target = models[0].config.target if models else "se"
    return PredictionSet(ensemble_predict(models, batch.pixels), batch.targets(target), list(batch.records))


def evaluate(
    models: Sequence[AttentionResNet],
    batch: ImageBatch,
    margins: Sequence[float] = DEFAULT_MARGINS,
    slices: Mapping[str, Predicate] | None = None,
    n_resamples: int = stats.N_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> tuple[EvalReport, PredictionSet]:
    if len(batch) == 0:
        raise EvaluationError("evaluation split is empty")
    preds = predict_batch(models, batch)
    return evaluate_predictions(preds, margins, slices, n_resamples, seed, workers), preds
