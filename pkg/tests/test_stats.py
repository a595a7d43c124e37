import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from refractnet import stats as S


def exact_upper_tail(k, n, p):
    """P(X >= k) by exact rational summation of the binomial pmf."""
    p = Fraction(p)
    return float(sum(math.comb(n, j) * p ** j * (1 - p) ** (n - j) for j in range(k, n + 1)))


def brute_force_window(labels_milli, margin_milli):
    """Best window count over every center on the 1e-3 D grid, in integer arithmetic."""
    y = np.asarray(labels_milli)
    centers = np.arange(y.min() - margin_milli, y.max() + margin_milli + 1)
    return int(np.max(np.sum(np.abs(y[None, :] - centers[:, None]) <= margin_milli, axis=1)))


def sort_reference_percentile(values, q):
    v = sorted(values)
    rank = q / 100 * (len(v) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (rank - lo) * (v[hi] - v[lo])


finite = st.floats(-20, 20, allow_nan=False)


class TestMae:
    def test_examples(self):
        assert S.mae([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert S.mae([0.0, 0.0], [1.0, -1.0]) == 1.0

    @given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30), st.floats(-50, 50))
    def test_shift_invariance(self, pairs, c):
        p, a = np.array(pairs).T
        assert abs(S.mae(p + c, a + c) - S.mae(p, a)) <= 1e-12 * max(1.0, abs(c)) * 10

    def test_errors(self):
        with pytest.raises(S.StatsError):
            S.mae([], [])
        with pytest.raises(S.StatsError):
            S.mae([1.0], [np.nan])
        with pytest.raises(S.StatsError):
            S.mae([1.0, 2.0], [1.0])


class TestRSquared:
    def test_examples(self):
        a = np.array([0.5, -1.0, 3.0])
        assert S.r_squared(a, a) == 1.0
        assert S.r_squared(np.full(3, a.mean()), a) == pytest.approx(0.0, abs=1e-15)

    def test_direct_formula(self):
        # preds [0, 1, 2] vs actuals [0, 2, 2]: mean 4/3, SS_tot 8/3, SS_res 1
        assert S.r_squared([0.0, 1.0, 2.0], [0.0, 2.0, 2.0]) == pytest.approx(1 - 3 / 8, abs=1e-15)

    def test_can_be_negative(self):
        assert S.r_squared([2.0, 0.0], [0.0, 2.0]) == -3.0

    def test_zero_variance(self):
        with pytest.raises(S.StatsError, match="zero variance"):
            S.r_squared([1.0, 2.0], [3.0, 3.0])
        with pytest.raises(S.StatsError):
            S.r_squared([1.0], [2.0])


class TestBaselineMae:
    def test_examples(self):
        assert S.baseline_mae([2.5] * 4) == 0.0
        assert S.baseline_mae([0.0, 2.0]) == 1.0

    def test_matches_constant_mean_predictor(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            y = rng.uniform(-8, 6, rng.integers(1, 300))
            assert abs(S.baseline_mae(y) - S.mae(np.full_like(y, y.mean()), y)) <= 1e-12

    def test_empty(self):
        with pytest.raises(S.StatsError):
            S.baseline_mae([])


class TestMarginAccuracy:
    def test_hand_count(self):
        assert S.margin_accuracy([0, 1, 2], [0.4, 2.2, 2.0], 0.5) == pytest.approx(2 / 3, abs=1e-15)

    def test_extremes(self):
        p, a = np.array([0.0, 1.0, 2.0]), np.array([0.3, 0.1, 2.9])
        assert S.margin_accuracy(p, a, 10.0) == 1.0
        assert S.margin_accuracy(p, a, 1e-9) == 0.0

    def test_inclusive(self):
        assert S.margin_accuracy([0.0], [0.5], 0.5) == 1.0

    @given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30),
           st.lists(st.floats(0.01, 10), min_size=2, max_size=6))
    def test_monotone_in_margin(self, pairs, margins):
        p, a = np.array(pairs).T
        accs = [S.margin_accuracy(p, a, m) for m in sorted(margins)]
        assert accs == sorted(accs)

    def test_bad_margin(self):
        for m in (0.0, -1.0, np.inf):
            with pytest.raises(S.StatsError):
                S.margin_accuracy([0.0], [0.0], m)


class TestSlidingWindow:
    def test_all_equal(self):
        for m in (0.01, 0.5, 3.0):
            assert S.sliding_window_baseline([1.25] * 7, m) == 1.0

    def test_worked_example_inclusive(self):
        labels = [-1, -1, 0, 0, 0, 1]
        # with both window ends closed, [-1, 0] (center -0.5) holds five labels and [-1, 1] holds all six
        assert S.sliding_window_baseline(labels, 0.5) == 5 / 6
        assert S.sliding_window_baseline(labels, 1.0) == 1.0
        assert S.sliding_window_baseline(labels, 0.25) == 0.5

    def test_matches_dense_grid_oracle(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            n = int(rng.integers(1, 201))
            step = (125, 250)[trial % 2]  # 1/8 D or 1/4 D label grid, exact in binary
            labels_milli = rng.integers(-64, 49, n) * step
            margin = float(rng.choice([0.125, 0.25, 0.5, 1.0, 2.0]))
            expected = brute_force_window(labels_milli, int(round(margin * 1000))) / n
            assert S.sliding_window_baseline(labels_milli / 1000, margin) == expected

    def test_dominates_constant_mean_predictor(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            y = rng.normal(0, 3, rng.integers(2, 120))
            for m in (0.5, 1.0, 2.0):
                assert S.sliding_window_baseline(y, m) >= S.margin_accuracy(np.full_like(y, y.mean()), y, m)

    def test_errors(self):
        with pytest.raises(S.StatsError):
            S.sliding_window_baseline([], 0.5)
        with pytest.raises(S.StatsError):
            S.sliding_window_baseline([1.0], 0.0)


class TestBinomial:
    def test_examples(self):
        assert S.binomial_test_one_tailed(0, 17, 0.3) == 1.0
        assert S.binomial_test_one_tailed(3, 3, 0.5) == pytest.approx(0.125, abs=1e-15)
        assert S.binomial_test_one_tailed(8, 10, 0.5) == pytest.approx(56 / 1024, abs=1e-15)

    def test_exact_summation_oracle(self):
        for p in (0.1, 0.3, 0.5, 0.7):
            for n in range(0, 31):
                for k in range(0, n + 1):
                    assert abs(S.binomial_test_one_tailed(k, n, p) - exact_upper_tail(k, n, p)) <= 1e-12

    def test_non_increasing_in_k(self):
        for n, p in ((30, 0.3), (200, 0.62), (1000, 0.05)):
            tails = [S.binomial_test_one_tailed(k, n, p) for k in range(n + 1)]
            assert all(a >= b for a, b in zip(tails, tails[1:]))

    def test_large_n_against_scipy(self):
        for k, n, p in ((500_500, 10 ** 6, 0.5), (1000, 10 ** 6, 0.001), (600, 1000, 0.55), (90, 100, 0.6)):
            ours, ref = S.binomial_test_one_tailed(k, n, p), binom.sf(k - 1, n, p)
            assert ours == pytest.approx(ref, rel=1e-8)

    def test_tiny_tail_stays_positive(self):
        v = S.binomial_test_one_tailed(900, 1000, 0.5)
        assert 0.0 < v < 1e-100

    @pytest.mark.parametrize("k,n,p", [(-1, 5, 0.5), (6, 5, 0.5), (1, 5, 0.0), (1, 5, 1.0), (1.5, 5, 0.5)])
    def test_invalid(self, k, n, p):
        with pytest.raises(S.StatsError):
            S.binomial_test_one_tailed(k, n, p)


class TestBootstrap:
    def test_protocol_constants(self):
        assert S.N_RESAMPLES == 2000
        assert S.PERCENTILES == (2.5, 97.5)

    def test_identical_sample(self):
        ci = S.bootstrap_ci(np.mean, [1.75] * 9, seed=4)
        assert ci.as_tuple() == (1.75, 1.75, 1.75)

    @pytest.mark.parametrize("seed", [0, 1, 9, 12345])
    def test_two_point_sample(self, seed):
        # the four equally likely resamples have means 0, .5, .5, 1
        assert S.bootstrap_ci(np.mean, [0.0, 1.0], seed=seed).as_tuple() == (0.0, 0.5, 1.0)

    def test_deterministic_and_seed_dependent(self):
        x = np.random.default_rng(0).normal(size=40)
        a, b = S.bootstrap_ci(np.mean, x, seed=3), S.bootstrap_ci(np.mean, x, seed=3)
        assert a == b
        assert S.bootstrap_ci(np.mean, x, seed=4) != a

    def test_worker_count_invariant(self):
        x = np.random.default_rng(1).normal(size=(30, 2))
        metric = S.pair_metric(S.mae)
        assert S.bootstrap_ci(metric, x, seed=2, workers=4) == S.bootstrap_ci(metric, x, seed=2)

    def test_matches_sort_reference_on_same_resamples(self):
        x = np.random.default_rng(5).exponential(size=25)
        idx = S.resample_indices(25, 2000, seed=8)
        values = [float(np.mean(x[i])) for i in idx]
        ci = S.bootstrap_ci(np.mean, x, seed=8)
        assert ci.lower == sort_reference_percentile(values, 2.5)
        assert ci.upper == sort_reference_percentile(values, 97.5)
        assert ci.point == float(np.mean(x))
        np.testing.assert_allclose([ci.lower, ci.upper], np.percentile(values, [2.5, 97.5]), rtol=1e-12)

    def test_resample_blocks_are_prefix_stable(self):
        np.testing.assert_array_equal(S.resample_indices(7, 120, 3)[:60], S.resample_indices(7, 60, 3))

    def test_skip_and_count_policy(self):
        def flaky(limit):
            calls = {"n": 0}

            def metric(s):
                calls["n"] += 1
                if 1 < calls["n"] <= limit + 1:  # call 1 is the point estimate
                    raise ValueError("undefined")
                return float(np.mean(s))
            return metric

        x = np.arange(10.0)
        assert S.bootstrap_ci(flaky(20), x, seed=0).skipped == 20  # exactly 1%
        with pytest.raises(S.BootstrapError):
            S.bootstrap_ci(flaky(21), x, seed=0)

    def test_r2_on_degenerate_sample_is_an_error(self):
        rows = np.array([[0.0, 1.0], [1.0, 2.0]])  # half of all resamples repeat one row
        with pytest.raises(S.BootstrapError):
            S.bootstrap_ci(S.pair_metric(S.r_squared), rows, seed=0)

    def test_coverage_sanity_band(self):
        rng = np.random.default_rng(77)
        covered = 0
        for trial in range(500):
            x = rng.normal(1.0, 2.0, 40)
            ci = S.bootstrap_ci(np.mean, x, seed=trial)
            covered += ci.lower <= 1.0 <= ci.upper
        assert 0.90 * 500 <= covered <= 0.99 * 500

    def test_empty(self):
        with pytest.raises(S.StatsError):
            S.bootstrap_ci(np.mean, [])
