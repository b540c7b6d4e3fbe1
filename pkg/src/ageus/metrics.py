"""Overlap/boundary metrics, regression errors, robust summaries and tests."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, special, stats
from scipy.spatial import cKDTree

from .core import SegmentationMask

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"
EXACT_WILCOXON_MAX_N = 25


def _pixels(m) -> np.ndarray:
    return m.pixels if isinstance(m, SegmentationMask) else np.asarray(m, dtype=bool)


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image edge counts as outside)."""
    px = _pixels(mask)
    return px & ~ndimage.binary_erosion(px, structure=ndimage.generate_binary_structure(2, 1),
                                        border_value=0)


def hausdorff_mm(a, b, spacing_mm=(1.0, 1.0)) -> float:
    """Exact symmetric Hausdorff distance between the two boundaries, in mm."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("Hausdorff distance undefined for an empty mask")
    sp = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), (2,))
    pa = np.argwhere(boundary(a)) * sp
    pb = np.argwhere(boundary(b)) * sp
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass(frozen=True)
class ErrorReport:
    mae: float
    mse: float
    rmse: float
    mape: float


def error_report(pred, truth) -> ErrorReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1 or len(pred) == 0:
        raise ValueError("pred and truth must be equal-length non-empty sequences")
    if (truth == 0).any():
        raise ValueError("MAPE undefined: a truth value is zero")
    err = pred - truth
    mse = float(np.mean(err**2))
    return ErrorReport(
        mae=float(np.mean(np.abs(err))),
        mse=mse,
        rmse=math.sqrt(mse),
        mape=float(np.mean(np.abs(err) / np.abs(truth))),
    )


@dataclass(frozen=True)
class MetricSummary:
    median: float
    iqr_low: float
    iqr_high: float
    worst5: float


def summarize(values, orientation: str = HIGHER_BETTER) -> MetricSummary:
    """Median, IQR and the 5%-worst tail (5th or 95th percentile by orientation)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot summarise an empty sample")
    if orientation not in (HIGHER_BETTER, LOWER_BETTER):
        raise ValueError(f"unknown orientation {orientation!r}")
    q5, q25, q50, q75, q95 = np.percentile(v, [5, 25, 50, 75, 95], method="linear")
    worst = q5 if orientation == HIGHER_BETTER else q95
    return MetricSummary(float(q50), float(q25), float(q75), float(worst))


def ks_normality(values) -> tuple[float, float]:
    """One-sample KS test against a normal with the sample mean and std.

    The p-value is the asymptotic Kolmogorov distribution; no Lilliefors
    correction for the estimated parameters.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    if n < 5:
        raise ValueError("KS normality test needs at least 5 values")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ValueError("KS normality test undefined for zero variance")
    cdf = stats.norm.cdf(x, loc=x.mean(), scale=sd)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
    d = float(min(max(d, 0.0), 1.0))
    return d, float(special.kolmogorov(math.sqrt(n) * d))


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments reaching each doubled positive-rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped. The statistic is ``min(W+, W-)``. For up
    to 25 non-zero pairs the p-value comes from the exact null
    distribution (ties handled through mid-ranks); beyond that, a normal
    approximation with tie-corrected variance.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_counts(doubled)
        probs = counts / 2.0**n
        k = int(round(2 * stat))
        p = 2.0 * probs[: k + 1].sum()
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        z = (stat - mean) / math.sqrt(var)
        p = 2.0 * stats.norm.sf(abs(z))
    return stat, float(min(p, 1.0))
