"""Evaluation statistics: error metrics, baselines, bootstrap intervals, binomial tests."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaln

N_RESAMPLES = 2000
PERCENTILES = (2.5, 97.5)
MAX_SKIP_FRACTION = 0.01
RESAMPLE_BLOCK = 50


class StatsError(ValueError):
    """Invalid input to a statistic."""


class BootstrapError(StatsError):
    """Too many resamples on which the metric was undefined."""


def _pairs(predicted, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise StatsError(f"predicted and actual differ in length: {p.size} vs {a.size}")
    if p.size == 0:
        raise StatsError("empty prediction set")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
        raise StatsError("non-finite values in prediction set")
    return p, a


def _labels(actual) -> np.ndarray:
    a = np.asarray(actual, dtype=np.float64).ravel()
    if a.size == 0:
        raise StatsError("empty label set")
    if not np.all(np.isfinite(a)):
        raise StatsError("non-finite labels")
    return a


def mae(predicted, actual) -> float:
    p, a = _pairs(predicted, actual)
    return float(np.mean(np.abs(p - a)))


def r_squared(predicted, actual) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``; negative for models worse than the mean."""
    p, a = _pairs(predicted, actual)
    if p.size < 2:
        raise StatsError("r_squared needs at least two pairs")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise StatsError("r_squared undefined: actual values have zero variance")
    return 1.0 - float(np.sum((p - a) ** 2)) / ss_tot


def baseline_mae(actual) -> float:
    """MAE of the constant predictor that always outputs the label mean."""
    a = _labels(actual)
    return float(np.mean(np.abs(a - a.mean())))


def _check_margin(margin: float) -> None:
    if not margin > 0 or not math.isfinite(margin):
        raise StatsError(f"margin must be a positive finite number, got {margin}")


def margin_accuracy(predicted, actual, margin: float) -> float:
    """Fraction of pairs with ``|predicted - actual| <= margin``."""
    _check_margin(margin)
    p, a = _pairs(predicted, actual)
    return float(np.mean(np.abs(p - a) <= margin))


def sliding_window_baseline(actual, margin: float, chunk: int = 2048) -> float:
    """Best accuracy of any constant predictor at the given margin.

    The maximum over centers ``c`` of ``#{|y - c| <= margin} / N`` is attained
    with a window edge on a sample, so only the centers ``y_i + margin`` and
    ``y_i`` are enumerated. Cost is quadratic in the number of distinct labels.
    """
    _check_margin(margin)
    y = _labels(actual)
    values = np.unique(y)
    centers = np.unique(np.concatenate([values + margin, values]))
    best = 0
    for start in range(0, centers.size, chunk):
        c = centers[start:start + chunk, None]
        best = max(best, int(np.max(np.sum(np.abs(y[None, :] - c) <= margin, axis=1))))
    return best / y.size


def binomial_test_one_tailed(k: int, n: int, null_p: float) -> float:
    """Exact upper tail ``P(X >= k)`` for ``X ~ Binomial(n, null_p)``.

    Terms are summed in log space from ``j = n`` down to ``k``, so the result is
    non-increasing in ``k`` as computed, not just mathematically.
    """
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))):
        raise StatsError("k and n must be integers")
    if n < 0 or not 0 <= k <= n:
        raise StatsError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 < null_p < 1.0:
        raise StatsError(f"null_p must lie in (0, 1), got {null_p}")
    if k == 0:
        return 1.0
    j = np.arange(n, k - 1, -1, dtype=np.float64)
    log_terms = (gammaln(n + 1.0) - gammaln(j + 1.0) - gammaln(n - j + 1.0)
                 + j * math.log(null_p) + (n - j) * math.log1p(-null_p))
    log_tail = np.logaddexp.accumulate(log_terms)[-1]
    return float(min(1.0, math.exp(log_tail)))


@dataclass(frozen=True)
class BootstrapCI:
    lower: float
    point: float
    upper: float
    skipped: int = 0

    def as_tuple(self) -> tuple[float, float, float]:
        return self.lower, self.point, self.upper


def resample_indices(n: int, n_resamples: int, seed: int) -> np.ndarray:
    """``[n_resamples, n]`` index array drawn in fixed blocks of ``RESAMPLE_BLOCK`` rows.

    Block ``b`` comes from the ``b``-th substream spawned from ``seed``, so any
    block can be regenerated independently of the others.
    """
    n_blocks = -(-n_resamples // RESAMPLE_BLOCK)
    streams = np.random.SeedSequence(seed).spawn(n_blocks)
    blocks = [np.random.default_rng(s).integers(0, n, size=(RESAMPLE_BLOCK, n)) for s in streams]
    return np.concatenate(blocks)[:n_resamples]


def percentile(sorted_values: np.ndarray, q: float) -> float:
    """Linear interpolation between the closest order statistics of an ascending array.

    Rank ``q / 100 * (n - 1)`` is split into ``lo = floor(rank)`` and
    ``frac``; the result is ``v[lo] + frac * (v[lo + 1] - v[lo])``. This is
    numpy's ``method="linear"`` up to rounding.
    """
    n = sorted_values.size
    if n == 0:
        raise StatsError("percentile of an empty array")
    rank = q / 100.0 * (n - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return float(sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]))


def percentile_interval(values: np.ndarray, percentiles=PERCENTILES) -> tuple[float, float]:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return percentile(ordered, percentiles[0]), percentile(ordered, percentiles[1])


def bootstrap_ci(
    metric: Callable[[np.ndarray], float],
    sample,
    n_resamples: int = N_RESAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapCI:
    """Nonparametric bootstrap percentile interval of ``metric`` over rows of ``sample``.

    Resamples on which the metric raises ``ValueError`` or returns a non-finite
    value are skipped and counted; more than 1% skipped is an error. Results
    are identical for any ``workers``.
    """
    data = np.asarray(sample, dtype=np.float64)
    if data.ndim == 0 or data.shape[0] == 0:
        raise StatsError("bootstrap needs a non-empty sample")
    if n_resamples < 1:
        raise StatsError("n_resamples must be >= 1")
    point = float(metric(data))
    indices = resample_indices(data.shape[0], n_resamples, seed)

    def one(idx: np.ndarray) -> float:
        try:
            v = float(metric(data[idx]))
        except ValueError:
            return math.nan
        return v if math.isfinite(v) else math.nan

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = np.array(list(pool.map(one, indices)))
    else:
        values = np.array([one(i) for i in indices])
    ok = values[np.isfinite(values)]
    skipped = n_resamples - ok.size
    if skipped > MAX_SKIP_FRACTION * n_resamples:
        raise BootstrapError(f"metric undefined on {skipped} of {n_resamples} resamples")
    lower, upper = percentile_interval(ok)
    return BootstrapCI(lower, point, upper, skipped)


def pair_metric(fn: Callable[[np.ndarray, np.ndarray], float]) -> Callable[[np.ndarray], float]:
    """Adapt ``fn(predicted, actual)`` to rows of an ``[N, 2]`` (predicted, actual) sample."""
    def metric(rows: np.ndarray) -> float:
        return fn(rows[:, 0], rows[:, 1])
    return metric
