"""Evaluation statistics: Dice overlap, Pearson correlation, Wilcoxon test."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation, DegenerateSampleError, UndefinedCorrelationError
from .volumes import SegmentationMask

__all__ = ["dice", "pearson", "average_ranks", "wilcoxon_signed_rank"]

EXACT_WILCOXON_LIMIT = 25


def dice(a: SegmentationMask, b: SegmentationMask) -> float:
    """2|A.B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    if a.dims != b.dims:
        raise ContractViolation(f"mask dims differ: {a.dims} vs {b.dims}")
    na = int(np.count_nonzero(a.voxels))
    nb = int(np.count_nonzero(b.voxels))
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.voxels & b.voxels))
    return 2.0 * inter / (na + nb)


def pearson(x, y) -> float:
    """Product-moment correlation of two equal-length samples (n >= 3)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise ContractViolation("inputs must be equal-length vectors")
    if len(x) < 3:
        raise ContractViolation(f"need at least 3 points, got {len(x)}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance sample")
    r = float(xc @ yc) / math.sqrt(sx * sy)
    return min(1.0, max(-1.0, r))


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(doubled_ranks: list[int], doubled_stat: int) -> float:
    """P(|W| >= |w|) over all 2^n equiprobable sign assignments.

    Counts sign assignments by dynamic programming over the lattice of
    achievable signed-rank sums (ranks doubled so ties stay integral);
    exactly equivalent to full enumeration.
    """
    total = sum(doubled_ranks)
    counts = np.zeros(2 * total + 1, dtype=np.float64)  # index = sum + total
    counts[total] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] += counts[: len(counts) - r]
        shifted[: len(counts) - r] += counts[r:]
        counts = shifted
    sums = np.arange(-total, total + 1)
    favorable = counts[np.abs(sums) >= abs(doubled_stat)].sum()
    return min(1.0, favorable / (2.0 ** len(doubled_ranks)))


def wilcoxon_signed_rank(pairs) -> tuple[float, float]:
    """Signed-rank statistic and two-sided p for paired scores.

    ``pairs`` is a sequence of (case_id, score_a, score_b).  Zero
    differences drop, tied absolute differences share average ranks, the
    statistic is the signed rank sum of a minus b (so swapping the models
    negates it).  The p-value is exact (all sign assignments) up to n=25
    nonzero differences, then a normal approximation whose variance uses
    the tie-corrected sum of squared ranks.
    """
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        raise ContractViolation("duplicate case ids in paired scores")
    diffs = np.array([float(a) - float(b) for _, a, b in pairs], dtype=np.float64)
    if not np.all(np.isfinite(diffs)):
        raise ContractViolation("paired scores must be finite")
    diffs = diffs[diffs != 0.0]
    if len(diffs) == 0:
        raise DegenerateSampleError("all paired differences are zero")

    ranks = average_ranks(np.abs(diffs))
    stat = float(np.sum(np.sign(diffs) * ranks))

    n = len(diffs)
    if n <= EXACT_WILCOXON_LIMIT:
        doubled = [int(round(2 * r)) for r in ranks]
        p = _exact_two_sided_p(doubled, int(round(2 * stat)))
    else:
        var = float(np.sum(ranks**2))
        z = stat / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return stat, p
