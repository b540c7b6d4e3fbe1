import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats
from scipy.spatial.distance import directed_hausdorff

from ageus.metrics import (
    HIGHER_BETTER,
    LOWER_BETTER,
    boundary,
    dice,
    error_report,
    hausdorff_mm,
    ks_normality,
    summarize,
    wilcoxon_signed_rank,
)

from conftest import disk_mask

masks = hnp.arrays(bool, (12, 12))


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[:2] = True
    b[1:3] = True
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def _brute_boundary(m):
    out = np.zeros_like(m)
    h, w = m.shape
    for r, c in zip(*np.nonzero(m)):
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w) or not m[rr, cc]:
                out[r, c] = True
    return out


@given(masks)
def test_boundary_matches_brute_force(m):
    assert (boundary(m) == _brute_boundary(m)).all()


def test_hausdorff_concentric_disks():
    a = disk_mask((100, 100), (50, 50), 20)
    b = disk_mask((100, 100), (50, 50), 30)
    assert hausdorff_mm(a, b, 0.5) == pytest.approx(5.0, abs=0.5)
    assert hausdorff_mm(a, a) == 0.0


@settings(max_examples=30, deadline=None)
@given(masks.filter(lambda m: m.any()), masks.filter(lambda m: m.any()),
       st.floats(0.05, 2.0), st.floats(0.05, 2.0))
def test_hausdorff_against_scipy(a, b, sr, sc):
    pa = np.argwhere(_brute_boundary(a)) * [sr, sc]
    pb = np.argwhere(_brute_boundary(b)) * [sr, sc]
    want = max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])
    got = hausdorff_mm(a, b, (sr, sc))
    assert got == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert got == hausdorff_mm(b, a, (sr, sc))
    assert got >= 0


def test_hausdorff_empty():
    with pytest.raises(ValueError):
        hausdorff_mm(np.zeros((5, 5)), np.ones((5, 5)))


def test_error_report_values():
    r = error_report([2.0, 4.0, 3.0], [1.0, 5.0, 3.0])
    assert r.mae == pytest.approx(2 / 3)
    assert r.mse == pytest.approx(2 / 3)
    assert r.rmse == pytest.approx(math.sqrt(2 / 3))
    assert r.mape == pytest.approx((1.0 + 0.2 + 0) / 3)


def test_error_report_zero_truth():
    with pytest.raises(ValueError, match="MAPE"):
        error_report([1.0], [0.0])


@given(st.lists(st.floats(0.1, 100), min_size=1, max_size=30))
def test_error_report_perfect(v):
    r = error_report(v, v)
    assert r.mae == r.mse == r.rmse == r.mape == 0.0


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0.5, 50)), min_size=1, max_size=30))
def test_error_report_ordering(pairs):
    p, t = map(np.array, zip(*pairs))
    r = error_report(p, t)
    assert r.rmse >= r.mae - 1e-9
    assert r.rmse == pytest.approx(math.sqrt(r.mse))


def test_summarize_linear_percentiles():
    s = summarize(np.arange(1, 21, dtype=float))
    assert s.median == 10.5
    assert s.iqr_low == pytest.approx(5.75)
    assert s.iqr_high == pytest.approx(15.25)
    assert s.worst5 == pytest.approx(1.95)
    assert summarize(np.arange(1, 21, dtype=float), LOWER_BETTER).worst5 == pytest.approx(19.05)


def test_summarize_rejects():
    with pytest.raises(ValueError):
        summarize([])
    with pytest.raises(ValueError):
        summarize([1.0], "sideways")


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=50))
def test_summarize_ordering(v):
    lo = summarize(v, HIGHER_BETTER)
    hi = summarize(v, LOWER_BETTER)
    assert lo.worst5 <= lo.iqr_low <= lo.median <= lo.iqr_high <= hi.worst5


def test_ks_matches_scipy_with_fixed_parameters():
    x = np.random.default_rng(4).normal(3, 2, 40)
    d, p = ks_normality(x)
    ref = stats.kstest(x, "norm", args=(x.mean(), x.std(ddof=1)), method="asymp")
    assert d == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-6)


def test_ks_detects_non_normal():
    x = np.random.default_rng(0).exponential(1.0, 400) ** 3
    assert ks_normality(x)[1] < 0.01
    assert ks_normality(np.random.default_rng(0).normal(size=400))[1] > 0.05


def test_ks_rejects_small_or_constant():
    with pytest.raises(ValueError):
        ks_normality([1, 2, 3])
    with pytest.raises(ValueError):
        ks_normality([2.0] * 10)


def _brute_wilcoxon_p(d):
    ranks = stats.rankdata(np.abs(d))
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        wp = ranks[np.array(signs, bool)].sum()
        hits += min(wp, ranks.sum() - wp) <= w + 1e-9
    return w, hits / 2 ** len(d)


def test_wilcoxon_all_positive_exact():
    stat, p = wilcoxon_signed_rank([1, 2, 3, 4, 5.0], [0, 0, 0, 0, 0.0])
    assert stat == 0.0
    assert p == pytest.approx(0.0625)
    stat, p = wilcoxon_signed_rank(np.arange(1, 7.0), np.zeros(6))
    assert p == pytest.approx(0.03125)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-4, 4).filter(bool), min_size=5, max_size=11))
def test_wilcoxon_exact_matches_enumeration(d):
    d = np.array(d, dtype=float)
    w, p_brute = _brute_wilcoxon_p(d)
    stat, p = wilcoxon_signed_rank(d, np.zeros_like(d))
    assert stat == w
    # the "at least as extreme" two-sided enumeration equals 2*lower tail for a symmetric null
    assert p == pytest.approx(min(1.0, p_brute), abs=1e-12)


def test_wilcoxon_matches_scipy_no_ties():
    rng = np.random.default_rng(2)
    a, b = rng.normal(0, 1, 20), rng.normal(0.4, 1, 20)
    stat, p = wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="exact")
    assert stat == ref.statistic
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_normal_approximation_large_n():
    rng = np.random.default_rng(3)
    a, b = rng.normal(0, 1, 60), rng.normal(0.3, 1, 60)
    stat, p = wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="approx", correction=False)
    assert stat == ref.statistic
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_swap_symmetry():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=15), rng.normal(size=15)
    assert wilcoxon_signed_rank(a, b) == wilcoxon_signed_rank(b, a)


def test_wilcoxon_rejects():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(8), np.ones(8))
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3.0], [0, 0, 0.0])
