"""Distance-map targets for femur endpoints and endpoint extraction from predicted maps.

A map stores, for every pixel, the distance to the nearer of the two femur
endpoints, normalised by its maximum. Endpoints are recovered as the minima
of the two low-valued basins.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import disk, local_minima
from skimage.segmentation import watershed

from .core import FemurAnnotation, write_png
from .geometry import vector_length_cm

SIGMA_PX = 2.0
OPENING_RADIUS = 2
START_PERCENTILE = 10.0
PERCENTILE_STEP = 2.0
PERCENTILE_RANGE = (2.0, 30.0)

_EIGHT = np.ones((3, 3), dtype=int)


class EndpointsNotSeparable(ValueError):
    def __init__(self, msg="endpoints not separable"):
        super().__init__(msg)


@dataclass(frozen=True)
class EndpointPair:
    p1: tuple[float, float]
    p2: tuple[float, float]
    fl_cm: float | None = None

    def __post_init__(self):
        if tuple(self.p1) == tuple(self.p2):
            raise ValueError("endpoint pair collapsed to a single point")

    def as_array(self) -> np.ndarray:
        return np.array([self.p1, self.p2], dtype=np.float64)


def order_pair(p, q):
    """Leftmost (then topmost) point first."""
    return (p, q) if (p[1], p[0]) <= (q[1], q[0]) else (q, p)


def raw_distance(annotation: FemurAnnotation, shape) -> np.ndarray:
    """Unnormalised distance (px) to the nearer endpoint."""
    rows, cols = np.indices(shape, dtype=np.float64)
    d = [np.hypot(rows - p[0], cols - p[1]) for p in (annotation.p1, annotation.p2)]
    return np.minimum(*d)


def make_distance_map(annotation: FemurAnnotation, shape) -> np.ndarray:
    """Training target in [0, 1]: 0 at the (rounded) endpoint pixels, 1 at the farthest pixel."""
    annotation.check_bounds(shape)
    if tuple(annotation.p1) == tuple(annotation.p2):
        raise ValueError("degenerate annotation: p1 == p2")
    d = raw_distance(annotation, shape)
    for p in (annotation.p1, annotation.p2):
        d[int(round(p[0])), int(round(p[1]))] = 0.0
    top = d.max()
    return d / top if top > 0 else d


def _renormalize(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12:
        return m
    return (m - lo) / (hi - lo)


def postprocess_map(dmap: np.ndarray, sigma: float = SIGMA_PX, radius: int = OPENING_RADIUS,
                    percentile: float = START_PERCENTILE) -> np.ndarray:
    """Denoise a predicted map before endpoint extraction.

    Gaussian smoothing, then the low-value region (below ``percentile``) is
    opened with a disk of ``radius``; low pixels removed by the opening are
    small spurious dips and are filled with the grey closing of the map.
    Genuine minima, which sit inside large low regions, keep their values.
    The result is re-normalised to [0, 1]; a constant map stays constant.
    """
    m = np.asarray(dmap, dtype=np.float64)
    if not np.isfinite(m).all():
        raise ValueError("distance map contains non-finite values")
    if m.max() - m.min() <= 1e-12:
        return m.copy()
    smooth = ndimage.gaussian_filter(m, sigma, mode="nearest") if sigma > 0 else m.copy()
    if radius > 0:
        fp = disk(radius)
        low = smooth <= np.percentile(smooth, percentile)
        spurious = low & ~ndimage.binary_opening(low, structure=fp)
        if spurious.any():
            closed = ndimage.grey_closing(smooth, footprint=fp, mode="nearest")
            smooth = np.where(spurious, closed, smooth)
    return _renormalize(smooth)


def low_regions(dmap: np.ndarray, q: float, radius: int = OPENING_RADIUS):
    """Label the opened ``map <= percentile(q)`` region (8-connectivity)."""
    low = dmap <= np.percentile(dmap, q)
    if radius > 0:
        low = ndimage.binary_opening(low, structure=disk(radius))
    return ndimage.label(low, structure=_EIGHT)


def _sweep_order(start, step, lo, hi):
    down = np.arange(start - step, lo - 1e-9, -step)
    up = np.arange(start + step, hi + 1e-9, step)
    out = [start]
    for i in range(max(len(down), len(up))):
        if i < len(down):
            out.append(float(down[i]))
        if i < len(up):
            out.append(float(up[i]))
    return out


def _merge_to_two(dmap: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """Flood from ``n > 2`` markers, then merge basins by lowest dynamic until two remain.

    The dynamic of a merge is the pass (saddle) height between two adjacent
    basins minus the higher of their minima.
    """
    basins = watershed(dmap, labels, connectivity=2)
    minima = {k: float(dmap[basins == k].min()) for k in range(1, n + 1)}
    passes: dict[tuple[int, int], float] = {}
    for sl_a, sl_b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                       ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        la, lb = basins[sl_a], basins[sl_b]
        h = np.maximum(dmap[sl_a], dmap[sl_b])
        diff = la != lb
        for i, j, v in zip(la[diff], lb[diff], h[diff]):
            key = (min(i, j), max(i, j))
            if v < passes.get(key, np.inf):
                passes[key] = float(v)
    parent = {k: k for k in minima}

    def find(k):
        while parent[k] != k:
            k = parent[k]
        return k

    alive = set(minima)
    while len(alive) > 2:
        best = None
        for (i, j), v in passes.items():
            ri, rj = find(i), find(j)
            if ri == rj:
                continue
            dyn = v - max(minima[ri], minima[rj])
            key = (dyn, min(minima[ri], minima[rj]), ri, rj)
            if best is None or key < best[0]:
                best = (key, ri, rj)
        if best is None:  # disconnected basins, keep the two lowest
            keep = sorted(alive, key=lambda k: minima[k])[:2]
            for k in alive - set(keep):
                parent[k] = keep[0]
            alive = set(keep)
            break
        _, ri, rj = best
        parent[rj] = ri
        minima[ri] = min(minima[ri], minima[rj])
        alive.discard(rj)
    out = np.zeros_like(basins)
    for new, root in enumerate(sorted(alive), start=1):
        members = [k for k in minima if find(k) == root]
        out[np.isin(basins, members)] = new
    return out


def _region_argmin(dmap: np.ndarray, region: np.ndarray) -> tuple[int, int]:
    # row-major scan, so ties resolve to the lexicographically smallest (row, col)
    vals = np.where(region, dmap, np.inf)
    r, c = np.unravel_index(int(np.argmin(vals)), dmap.shape)
    return int(r), int(c)


def locate_endpoints(dmap: np.ndarray, percentile: float = START_PERCENTILE,
                     radius: int = OPENING_RADIUS, step: float = PERCENTILE_STEP,
                     q_range: tuple[float, float] = PERCENTILE_RANGE) -> EndpointPair:
    """Extract the two endpoint pixels from a (post-processed) distance map.

    The map is thresholded at a percentile and opened. If that does not give
    exactly two components the percentile is swept around the start value,
    keeping the attempt with a component count closest to two. The chosen
    components seed a watershed flood of the map; extra basins are merged,
    and a lone component is split using its regional minima as seeds. Each
    of the two final basins contributes its minimum pixel.

    Raises :class:`EndpointsNotSeparable` when only one basin can be formed.
    """
    m = np.asarray(dmap, dtype=np.float64)
    best = None
    for q in _sweep_order(percentile, step, *q_range):
        labels, n = low_regions(m, q, radius)
        if n == 0:
            continue
        # prefer more components over fewer: extra ones can be merged
        rank = (abs(n - 2), -n)
        if best is None or rank < best[2]:
            best = (labels, n, rank)
        if n == 2:
            break
    if best is None:
        raise EndpointsNotSeparable()
    labels, n, _ = best
    if n == 1:
        # a single low region: split it using its regional minima as markers
        labels, n = ndimage.label(local_minima(m, connectivity=2) & (labels == 1),
                                  structure=_EIGHT)
        if n < 2:
            raise EndpointsNotSeparable()
    if n == 2:
        regions = watershed(m, labels, connectivity=2)
    else:
        regions = _merge_to_two(m, labels, n)
    p, q = (_region_argmin(m, regions == k) for k in (1, 2))
    p, q = order_pair(p, q)
    return EndpointPair((float(p[0]), float(p[1])), (float(q[0]), float(q[1])))


def femur_length(pair, spacing_mm) -> float:
    """Physical distance between the two endpoints, in cm."""
    p1, p2 = (pair.p1, pair.p2) if hasattr(pair, "p1") else pair
    return vector_length_cm(np.subtract(p2, p1), spacing_mm)


def save_map_png(path, dmap: np.ndarray):
    """Write a map as 16-bit PNG, ``value = round(65535 * v)``."""
    write_png(path, np.asarray(dmap, dtype=np.float64), bits=16)

