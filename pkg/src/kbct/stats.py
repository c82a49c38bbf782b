"""Paired nonparametric tests used by the diagnostic reports.

The Wilcoxon signed-rank statistic here is W = min(W+, W-) with zero
differences dropped and average ranks over tied magnitudes.  For n <= 25
the two-sided p-value is exact: P(min(W+, W-) <= W_observed) under
uniform random signs, computed by dynamic programming over doubled ranks
(doubling keeps tied half-ranks integral).  Larger samples use the
normal approximation with the tie correction and a continuity
correction of one half.
"""

from __future__ import annotations

import math

import numpy as np

EXACT_LIMIT = 25


class DegenerateSample(ValueError):
    """Every paired difference is zero: the test has nothing to rank."""


def average_ranks(values) -> np.ndarray:
    """Ranks 1..n with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j < values.size and values[order[j]] == values[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + 1 + j) / 2.0
        i = j
    return ranks


def _exact_p(doubled_ranks, w_doubled) -> float:
    """P(min(W+, W-) <= w) by counting sign assignments.

    ``ways[s]`` counts assignments whose doubled W+ equals s; each of the
    2^n assignments is equally likely under the null.
    """
    total = int(sum(doubled_ranks))
    ways = np.zeros(total + 1, dtype=np.float64)
    ways[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(ways)
        shifted[r:] = ways[:total + 1 - r]
        ways = ways + shifted
    s = np.arange(total + 1)
    hit = np.minimum(s, total - s) <= w_doubled
    return float(ways[hit].sum() / 2.0 ** len(doubled_ranks))


def _normal_p(ranks, w) -> float:
    n = ranks.size
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: each group of t equal magnitudes removes (t^3-t)/48
    _, counts = np.unique(ranks, return_counts=True)
    var -= float(((counts ** 3 - counts) / 48.0).sum())
    if var <= 0:
        return 1.0
    z = (w + 0.5 - mu) / math.sqrt(var)
    return min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))


def wilcoxon_signed_rank(diffs, method=None):
    """(W, two-sided p) for paired differences.

    ``method`` forces "exact" or "normal"; the default picks exact up to
    25 nonzero differences.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    if d.size == 0:
        raise DegenerateSample("all paired differences are zero")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method is None:
        method = "exact" if d.size <= EXACT_LIMIT else "normal"
    if method == "exact":
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_p(doubled, int(round(2.0 * w)))
    elif method == "normal":
        p = _normal_p(ranks, w)
    else:
        raise ValueError(f"unknown method {method!r}")
    return w, p


def sign_test_greater(successes, n) -> float:
    """One-sided sign test: P(X >= successes) for X ~ Binomial(n, 1/2).

    Used to ask whether one system beats another on more queries than
    chance allows; ties must be dropped by the caller.
    """
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    if n == 0:
        raise DegenerateSample("no untied comparisons")
    total = sum(math.comb(n, k) for k in range(successes, n + 1))
    return total / 2.0 ** n
