"""Wilcoxon and sign-test checks against brute-force enumeration."""

import itertools
import math

import numpy as np
import pytest

from kbct.stats import (
    DegenerateSample,
    average_ranks,
    sign_test_greater,
    wilcoxon_signed_rank,
)


def enumeration_oracle(diffs):
    """Exact two-sided p by walking all 2^n sign assignments."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    n = d.size
    ranks = average_ranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w_obs = min(w_plus, ranks.sum() - w_plus)
    hits = 0
    for signs in itertools.product((1.0, -1.0), repeat=n):
        wp = sum(r for r, s in zip(ranks, signs) if s > 0)
        if min(wp, ranks.sum() - wp) <= w_obs:
            hits += 1
    return w_obs, hits / 2.0 ** n


class TestAverageRanks:
    def test_distinct(self):
        assert average_ranks([3.0, 1.0, 2.0]).tolist() == [3.0, 1.0, 2.0]

    def test_ties_share_mean_position(self):
        assert average_ranks([2.0, 2.0, 5.0]).tolist() == [1.5, 1.5, 3.0]

    def test_all_equal(self):
        assert average_ranks([7, 7, 7, 7]).tolist() == [2.5] * 4


class TestWilcoxon:
    def test_all_positive_small(self):
        w, p = wilcoxon_signed_rank([1, 2, 3, 4, 5])
        assert w == 0.0
        assert p == pytest.approx(0.0625)

    def test_tied_magnitudes_opposite_signs(self):
        w, p = wilcoxon_signed_rank([1.0, -1.0])
        assert w == 1.5
        assert p == 1.0

    def test_zeros_dropped(self):
        w1, p1 = wilcoxon_signed_rank([0.0, 1, 2, 3, 4, 5, 0.0])
        w2, p2 = wilcoxon_signed_rank([1, 2, 3, 4, 5])
        assert (w1, p1) == (w2, p2)

    def test_all_zero_degenerate(self):
        with pytest.raises(DegenerateSample):
            wilcoxon_signed_rank([0.0, 0.0])

    def test_symmetric_sample_not_significant(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            half = rng.uniform(0.5, 3.0, size=6)
            d = np.concatenate([half, -half])
            _, p = wilcoxon_signed_rank(d)
            assert p >= 0.5

    def test_exact_matches_sign_enumeration(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            n = int(rng.integers(2, 11))
            # small integer magnitudes force plenty of ties
            d = rng.integers(-4, 5, size=n)
            if not np.any(d):
                d[0] = 1
            w, p = wilcoxon_signed_rank(d, method="exact")
            w_want, p_want = enumeration_oracle(d)
            assert w == w_want, (trial, d)
            assert p == p_want, (trial, d)

    def test_normal_close_to_exact_at_boundary(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            d = rng.standard_normal(25) + 0.3
            d = d[d != 0]
            _, p_exact = wilcoxon_signed_rank(d, method="exact")
            _, p_norm = wilcoxon_signed_rank(d, method="normal")
            assert abs(p_exact - p_norm) < 0.02

    def test_auto_switches_to_normal(self):
        rng = np.random.default_rng(8)
        d = rng.standard_normal(40) + 1.0
        w_auto, p_auto = wilcoxon_signed_rank(d)
        w_norm, p_norm = wilcoxon_signed_rank(d, method="normal")
        assert (w_auto, p_auto) == (w_norm, p_norm)

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            wilcoxon_signed_rank([1.0], method="bootstrap")


class TestSignTest:
    def test_exact_tail(self):
        # P(X >= 8) for Binomial(10, 1/2)
        want = (math.comb(10, 8) + math.comb(10, 9) + math.comb(10, 10)) / 2 ** 10
        assert sign_test_greater(8, 10) == pytest.approx(want)

    def test_zero_successes_is_one(self):
        assert sign_test_greater(0, 12) == 1.0

    def test_all_successes(self):
        assert sign_test_greater(12, 12) == pytest.approx(2.0 ** -12)

    def test_no_data(self):
        with pytest.raises(DegenerateSample):
            sign_test_greater(0, 0)

    def test_bounds(self):
        with pytest.raises(ValueError):
            sign_test_greater(5, 3)
