import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guide.metrics import (
    BehavioralProfile,
    DegenerateSampleError,
    GlycemicSummary,
    MetricError,
    ProfileEvent,
    behavioral_profile,
    cosine_similarity,
    glycemic_summary,
    holm_bonferroni,
    mean_profile,
    mrd,
    pnd,
    wilcoxon_signed_rank,
)


def enumeration_oracle(x, y, alternative="two-sided"):
    """Independent exact oracle: enumerate all 2^n sign assignments of the
    ranked magnitudes and read tail probabilities off the resulting null
    distribution.  Only valid for distinct magnitudes (integer ranks)."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0]
    mags = np.abs(d)
    assert np.unique(mags).size == d.size, "oracle needs distinct magnitudes"
    ranks = np.argsort(np.argsort(mags)) + 1
    w_obs = ranks[d > 0].sum()
    n = d.size
    w_all = [sum(r for r, s in zip(ranks, signs) if s)
             for signs in itertools.product((False, True), repeat=n)]
    total = len(w_all)
    max_w = n * (n + 1) // 2
    if alternative == "greater":
        p = sum(1 for w in w_all if w >= w_obs) / total
    else:
        lo, hi = min(w_obs, max_w - w_obs), max(w_obs, max_w - w_obs)
        p = (sum(1 for w in w_all if w <= lo) + sum(1 for w in w_all if w >= hi)) / total
    return min(1.0, p)


class TestGlycemicSummary:
    def test_constant_in_range(self):
        s = glycemic_summary([100.0] * 12)
        assert (s.tir_pct, s.tbr_pct, s.tar_pct, s.cv_pct) == (100.0, 0.0, 0.0, 0.0)

    def test_count_arithmetic(self):
        s = glycemic_summary([100.0] * 9 + [200.0] * 3)
        assert s.tir_pct == pytest.approx(75.0)
        assert s.tar_pct == pytest.approx(25.0)

    def test_two_point_cv_by_hand(self):
        s = glycemic_summary([50.0, 150.0])
        assert s.tbr_pct == 50.0 and s.tir_pct == 50.0
        assert s.cv_pct == pytest.approx(50.0)  # population sd 50, mean 100

    def test_boundaries_belong_to_tir(self):
        s = glycemic_summary([70.0, 180.0])
        assert s.tir_pct == 100.0

    def test_partition_sums_to_100(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            g = rng.uniform(21, 599, size=rng.integers(1, 300))
            s = glycemic_summary(g)
            assert abs(s.tir_pct + s.tar_pct + s.tbr_pct - 100.0) < 1e-9
            for v in (s.tir_pct, s.tar_pct, s.tbr_pct):
                assert 0.0 <= v <= 100.0

    def test_empty_and_nonpositive_rejected(self):
        with pytest.raises(MetricError):
            glycemic_summary([])
        with pytest.raises(MetricError):
            glycemic_summary([100.0, -5.0])


class TestBehavioralProfile:
    def test_hand_arithmetic(self):
        events = [ProfileEvent("carb", 7.0, 65.0), ProfileEvent("carb", 12.0, 65.0),
                  ProfileEvent("carb", 19.0, 65.0)]
        p = behavioral_profile(events, days=1.0)
        assert p.meal_freq == pytest.approx(3.0)
        assert p.avg_carbs == pytest.approx(65.0)
        assert p.meal_gap == pytest.approx(6.0)

    def test_horizon_fallback_for_missing_kind(self):
        p = behavioral_profile([ProfileEvent("carb", 8.0, 50.0)], days=1.0)
        assert p.bolus_freq == 0.0
        assert p.bolus_gap == 24.0
        assert p.meal_gap == 24.0  # single event also has no gap

    def test_negative_magnitude_rejected(self):
        with pytest.raises(MetricError):
            behavioral_profile([ProfileEvent("bolus", 1.0, -2.0)], days=1.0)

    def test_unsorted_events_handled(self):
        events = [ProfileEvent("bolus", 20.0, 4.0), ProfileEvent("bolus", 8.0, 6.0)]
        p = behavioral_profile(events, days=1.0)
        assert p.bolus_gap == pytest.approx(12.0)
        assert p.avg_bolus == pytest.approx(5.0)

    def test_mean_profile_pools_elementwise(self):
        a = BehavioralProfile(3.0, 60.0, 2.0, 5.0, 6.0, 10.0)
        b = BehavioralProfile(5.0, 70.0, 4.0, 7.0, 8.0, 12.0)
        m = mean_profile([a, b])
        assert np.allclose(m.as_vector(), (a.as_vector() + b.as_vector()) / 2)


class TestSimilarity:
    def test_cosine_examples(self):
        assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
        assert cosine_similarity([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)

    def test_cosine_zero_vector_rejected(self):
        with pytest.raises(MetricError):
            cosine_similarity([0, 0], [1, 2])

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
    @settings(max_examples=100)
    def test_cosine_bounded(self, xs):
        x = np.array(xs)
        y = x[::-1].copy() + 0.5
        if np.linalg.norm(x) == 0 or np.linalg.norm(y) == 0:
            return
        c = cosine_similarity(x, y)
        assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12

    def test_mrd_examples(self):
        assert mrd([1, 2], [1, 2]) == 0.0
        assert mrd([2, 2], [1, 2]) == pytest.approx(0.5)
        with pytest.raises(MetricError, match="component 1"):
            mrd([1, 2], [1, 0])

    @given(st.floats(0.1, 5.0))
    @settings(max_examples=50)
    def test_mrd_scale_property(self, c):
        y = np.array([1.0, 2.0, 3.0])
        assert mrd(c * y, y) == pytest.approx(abs(c - 1.0))

    def test_pnd_examples(self):
        assert pnd([1, 2, 3], [1, 2, 3]) == 0.0
        assert pnd([2, 2, 3], [1, 2, 3]) == pytest.approx(1 / 6)
        y = np.array([1.0, -2.0, 3.0])
        assert pnd(2 * y, y) == pytest.approx(1.0)
        with pytest.raises(MetricError):
            pnd([1.0], [0.0])


class TestWilcoxon:
    def test_all_positive_n6(self):
        x = np.array([1, 2, 3, 4, 5, 6], dtype=float)
        y = np.zeros(6)
        res = wilcoxon_signed_rank(x, y)
        assert res.method == "exact"
        assert res.p_value == pytest.approx(2 / 64)
        assert res.statistic == 21.0

    def test_degenerate_error(self):
        with pytest.raises(DegenerateSampleError):
            wilcoxon_signed_rank(np.ones(6), np.ones(6))

    def test_symmetric_fixture_exact_p_one(self):
        # distinct magnitudes arranged so W+ sits exactly at the center
        d = np.array([1.0, -2.0, -3.0, -4.0, -5.0, 6.0, 7.0])
        res = wilcoxon_signed_rank(d, np.zeros(7))
        assert res.method == "exact"
        assert res.p_value == 1.0

    def test_paired_plus_minus_fixture_p_one(self):
        # d and -d paired forces ties, hence the normal branch; symmetry
        # still pins p at 1
        d = np.array([1.0, -1.0, 2.0, -2.0, 3.0, -3.0])
        res = wilcoxon_signed_rank(d, np.zeros(6))
        assert res.method == "normal"
        assert res.p_value == 1.0

    def test_exact_matches_enumeration_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n = int(rng.integers(5, 11))
            while True:
                x = rng.normal(size=n) * 3
                y = rng.normal(size=n)
                d = x - y
                if (d != 0).all() and np.unique(np.abs(d)).size == n:
                    break
            for alternative in ("two-sided", "greater"):
                res = wilcoxon_signed_rank(x, y, alternative)
                assert res.method == "exact"
                assert res.p_value == pytest.approx(
                    enumeration_oracle(x, y, alternative), abs=1e-12)

    def test_ties_fall_through_to_normal(self):
        x = np.array([1.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        res = wilcoxon_signed_rank(x, np.zeros(6))
        assert res.method == "normal"

    def test_normal_branch_tracks_enumeration_at_n13(self):
        # n=13 takes the normal branch; 2^13 sign patterns are still cheap
        # to enumerate, so check the approximation against the truth
        rng = np.random.default_rng(7)
        for _ in range(5):
            while True:
                d = rng.normal(size=13) * 2
                if np.unique(np.abs(d)).size == 13 and (d != 0).all():
                    break
            res = wilcoxon_signed_rank(d, np.zeros(13))
            assert res.method == "normal"
            exact = enumeration_oracle(d, np.zeros(13))
            assert res.p_value == pytest.approx(exact, abs=0.05)

    def test_minimum_sample_size(self):
        with pytest.raises(MetricError):
            wilcoxon_signed_rank(np.array([1.0, 2, 3, 4]), np.zeros(4))

    def test_greater_alternative_direction(self):
        x = np.arange(1.0, 9.0)
        res_up = wilcoxon_signed_rank(x, np.zeros(8), "greater")
        res_down = wilcoxon_signed_rank(-x, np.zeros(8), "greater")
        assert res_up.p_value < 0.01
        assert res_down.p_value > 0.99


class TestHolm:
    def test_hand_example(self):
        assert np.allclose(holm_bonferroni([0.01, 0.02, 0.20]), [0.03, 0.04, 0.20])

    def test_single_test_identity(self):
        assert holm_bonferroni([0.37]) == pytest.approx([0.37])

    def test_tied_raw_values_cap(self):
        assert np.allclose(holm_bonferroni([0.5, 0.5]), [1.0, 1.0])

    def test_order_restored(self):
        raw = np.array([0.20, 0.01, 0.02])
        adj = holm_bonferroni(raw)
        assert np.allclose(adj, [0.20, 0.03, 0.04])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
    @settings(max_examples=150)
    def test_dominates_raw_and_bounded_by_bonferroni(self, ps):
        raw = np.array(ps)
        adj = holm_bonferroni(raw)
        m = raw.size
        assert (adj >= raw - 1e-15).all()
        assert (adj <= np.minimum(1.0, m * raw) + 1e-15).all()
        order = np.argsort(raw, kind="stable")
        assert (np.diff(adj[order]) >= -1e-15).all()

    def test_out_of_range_rejected(self):
        with pytest.raises(MetricError):
            holm_bonferroni([0.5, 1.5])
