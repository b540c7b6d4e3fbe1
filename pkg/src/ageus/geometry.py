"""Contours, ellipse fitting and head/abdomen biometry.

Point arrays are ``(N, 2)`` in ``(row, col)`` order. An ellipse rotation
``theta`` is the angle of the major axis measured from the column axis
towards the row axis, so a point on the curve is::

    col = cc + a cos(theta) cos(t) - b sin(theta) sin(t)
    row = rc + a sin(theta) cos(t) + b cos(theta) sin(t)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage import measure

from .core import SegmentationMask, is_isotropic


class GeometryError(ValueError):
    pass


class NoStructureError(GeometryError):
    def __init__(self, msg="no structure found"):
        super().__init__(msg)


class StructureTooSmallError(GeometryError):
    def __init__(self, msg="structure too small"):
        super().__init__(msg)


class DegenerateConicError(GeometryError):
    def __init__(self, msg="degenerate conic"):
        super().__init__(msg)


MIN_COMPONENT_PX = 10


@dataclass(frozen=True)
class EllipseParams:
    center: tuple[float, float]
    a: float
    b: float
    theta: float
    residual: float = 0.0

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"need a >= b > 0, got a={self.a}, b={self.b}")
        if not (0.0 <= self.theta < math.pi):
            raise ValueError(f"theta must lie in [0, pi), got {self.theta}")

    @classmethod
    def make(cls, center, a, b, theta, residual=0.0) -> "EllipseParams":
        """Build from unnormalised axes/angle: swaps axes if needed and wraps theta."""
        if b > a:
            a, b = b, a
            theta += math.pi / 2
        theta = math.fmod(theta, math.pi)
        if theta < 0:
            theta += math.pi
        if theta >= math.pi:  # fmod rounding
            theta = 0.0
        return cls((float(center[0]), float(center[1])), float(a), float(b), float(theta), residual)

    def points(self, n: int = 100, phase: float = 0.0) -> np.ndarray:
        t = phase + np.linspace(0, 2 * np.pi, n, endpoint=False)
        ct, st = math.cos(self.theta), math.sin(self.theta)
        col = self.center[1] + self.a * ct * np.cos(t) - self.b * st * np.sin(t)
        row = self.center[0] + self.a * st * np.cos(t) + self.b * ct * np.sin(t)
        return np.column_stack([row, col])

    def contains(self, rows, cols) -> np.ndarray:
        dr, dc = np.asarray(rows) - self.center[0], np.asarray(cols) - self.center[1]
        ct, st = math.cos(self.theta), math.sin(self.theta)
        u = dc * ct + dr * st
        v = -dc * st + dr * ct
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def scaled(self, spacing) -> "EllipseParams":
        """Same ellipse expressed in units of ``spacing`` (isotropic only)."""
        s = float(spacing)
        return EllipseParams((self.center[0] * s, self.center[1] * s), self.a * s, self.b * s,
                             self.theta, self.residual)


@dataclass
class BiometricSet:
    hc_cm: float | None = None
    bpd_cm: float | None = None
    ac_cm: float | None = None
    fl_cm: float | None = None
    warnings: list[str] = field(default_factory=list)

    def as_tuple(self):
        return self.hc_cm, self.bpd_cm, self.ac_cm, self.fl_cm

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.as_tuple())


# -------------------------------------------------------------- contours

# clockwise Moore neighbourhood in (row, col), starting north
_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected foreground component as a boolean array."""
    px = mask.pixels if isinstance(mask, SegmentationMask) else np.asarray(mask, dtype=bool)
    if not px.any():
        raise NoStructureError()
    labels, n = ndimage.label(px, structure=np.ones((3, 3), dtype=int))
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    if sizes[keep - 1] < MIN_COMPONENT_PX:
        raise StructureTooSmallError()
    return labels == keep


def trace_boundary(component: np.ndarray) -> np.ndarray:
    """Moore-neighbour tracing of the outer boundary pixels of one component."""
    padded = np.pad(component, 1)
    rows, cols = np.nonzero(padded)
    start = (int(rows[0]), int(cols[0]))  # raster-first pixel; its west neighbour is empty
    contour = [start]
    cur, back = start, 6  # came from the west
    first_move = None
    while True:
        for k in range(1, 9):
            d = (back + k) % 8
            nr, nc = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if padded[nr, nc]:
                nxt = (nr, nc)
                # new backtrack: the empty neighbour examined just before nxt,
                # expressed relative to nxt
                pr, pc = cur[0] + _MOORE[(d - 1) % 8][0], cur[1] + _MOORE[(d - 1) % 8][1]
                back = _MOORE.index((pr - nr, pc - nc))
                break
        else:
            break  # isolated pixel
        if first_move is None:
            first_move = (cur, nxt)
        elif (cur, nxt) == first_move:
            break
        cur = nxt
        contour.append(cur)
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    return np.asarray(contour, dtype=np.float64) - 1.0


def extract_contour(mask, subpixel: bool = False) -> np.ndarray:
    """Closed boundary polygon of the largest connected component.

    With ``subpixel=False`` the result is the ordered list of boundary pixel
    centres (Moore tracing). With ``subpixel=True`` it is the 0.5 iso-line
    of the component (marching squares), which runs along the pixel edges
    and is what the biometry functions fit ellipses to.
    """
    comp = largest_component(mask)
    if not subpixel:
        pts = trace_boundary(comp)
    else:
        lines = measure.find_contours(np.pad(comp, 1).astype(np.float64), 0.5)
        pts = max(lines, key=len)
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        pts = pts - 1.0
    if len(pts) < 6:
        raise StructureTooSmallError()
    return pts


# --------------------------------------------------------------- ellipse

_C1_INV = np.linalg.inv(np.array([[0.0, 0.0, 2.0], [0.0, -1.0, 0.0], [2.0, 0.0, 0.0]]))


def fit_conic(points) -> tuple[np.ndarray, float]:
    """Direct least-squares ellipse-specific conic fit (numerically stable form).

    Returns the conic ``(A, B, C, D, E, F)`` for
    ``A x^2 + B x y + C y^2 + D x + E y + F = 0`` with ``x = col``,
    ``y = row``, unit-normalised, and the RMS algebraic residual on the
    input points.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise DegenerateConicError("degenerate conic: need at least 6 points")
    x, y = pts[:, 1], pts[:, 0]
    mx, my = x.mean(), y.mean()
    s = math.sqrt(np.mean((x - mx) ** 2 + (y - my) ** 2))
    if not s > 0:
        raise DegenerateConicError()
    xn, yn = (x - mx) / s, (y - my) / s
    d1 = np.column_stack([xn * xn, xn * yn, yn * yn])
    d2 = np.column_stack([xn, yn, np.ones_like(xn)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    if np.linalg.cond(s3) > 1e12:
        raise DegenerateConicError()
    t = -np.linalg.solve(s3, s2.T)
    m = _C1_INV @ (s1 + s2 @ t)
    _, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if len(ok) == 0:
        raise DegenerateConicError()
    cands = []
    for i in ok:
        a1 = vecs[:, i]
        coef = np.concatenate([a1, t @ a1])
        coef /= np.linalg.norm(coef)
        r = np.hstack([d1, d2]) @ coef
        cands.append((float(np.sqrt(np.mean(r * r))), coef))
    residual, (A, B, C, D, E, F) = min(cands, key=lambda c: c[0])
    # undo the normalisation x = (X - mx) / s
    A2, B2, C2 = A / s**2, B / s**2, C / s**2
    D2 = D / s - 2 * A2 * mx - B2 * my
    E2 = E / s - 2 * C2 * my - B2 * mx
    F2 = A2 * mx**2 + B2 * mx * my + C2 * my**2 - D / s * mx - E / s * my + F
    conic = np.array([A2, B2, C2, D2, E2, F2])
    return conic / np.linalg.norm(conic), residual


def conic_to_params(conic, residual: float = 0.0) -> EllipseParams:
    A, B, C, D, E, F = conic
    if not 4 * A * C - B * B > 0:
        raise DegenerateConicError()
    x0, y0 = np.linalg.solve([[2 * A, B], [B, 2 * C]], [-D, -E])
    f0 = F + 0.5 * (D * x0 + E * y0)
    q = np.array([[A, B / 2], [B / 2, C]])
    if f0 > 0:
        q, f0 = -q, -f0
    if not f0 < 0:
        raise DegenerateConicError()
    lam, vec = np.linalg.eigh(q)  # ascending: major axis first
    if not lam[0] > 0:
        raise DegenerateConicError()
    a = math.sqrt(-f0 / lam[0])
    b = math.sqrt(-f0 / lam[1])
    theta = math.atan2(vec[1, 0], vec[0, 0])
    return EllipseParams.make((y0, x0), a, b, theta, residual)


def fit_ellipse(points) -> EllipseParams:
    """Fit an ellipse to ``(row, col)`` points.

    Raises :class:`DegenerateConicError` for collinear or otherwise
    non-elliptical input.
    """
    conic, residual = fit_conic(points)
    return conic_to_params(conic, residual)


def ramanujan_perimeter(a: float, b: float) -> float:
    """Ramanujan's second perimeter approximation."""
    a, b = float(a), float(b)
    if a + b == 0:
        return 0.0
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def ellipse_perimeter(e: EllipseParams) -> float:
    return ramanujan_perimeter(e.a, e.b)


# ----------------------------------------------------------------- units


def px_to_cm(length_px: float, spacing_mm, direction=None) -> float:
    """Convert a pixel length to centimetres.

    ``spacing_mm`` is a scalar or ``(row, col)`` pair. Anisotropic spacing
    needs the ``(drow, dcol)`` direction of the measured segment.
    """
    sp = np.atleast_1d(np.asarray(spacing_mm, dtype=np.float64))
    if (sp <= 0).any():
        raise ValueError(f"spacing must be positive, got {spacing_mm}")
    if sp.size == 1 or is_isotropic(sp):
        return float(length_px) * float(sp[0]) / 10.0
    if direction is None:
        raise ValueError("anisotropic spacing needs a direction for straight-line lengths")
    u = np.asarray(direction, dtype=np.float64)
    norm = np.hypot(*u)
    if norm == 0:
        raise ValueError("direction must be non-zero")
    return float(length_px) * float(np.hypot(*(u / norm * sp))) / 10.0


def vector_length_cm(vec_px, spacing_mm) -> float:
    """Physical length of a ``(drow, dcol)`` pixel vector."""
    sp = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), (2,))
    return float(np.hypot(*(np.asarray(vec_px, dtype=np.float64) * sp))) / 10.0


# -------------------------------------------------------------- biometry


def _fit_physical(mask, spacing_mm):
    """Fit in pixel space and in isotropic millimetre space."""
    contour = extract_contour(mask, subpixel=True)
    ell_px = fit_ellipse(contour)
    sp = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), (2,))
    if (sp <= 0).any():
        raise ValueError(f"spacing must be positive, got {spacing_mm}")
    if is_isotropic(sp):
        ell_mm = ell_px.scaled(sp[0])
    else:
        ell_mm = fit_ellipse(contour * sp)
    return ell_px, ell_mm


def head_biometrics(mask, spacing_mm):
    """Return ``(hc_cm, bpd_cm, ellipse_px)`` for a head mask in original pixel space."""
    ell_px, ell_mm = _fit_physical(mask, spacing_mm)
    return ellipse_perimeter(ell_mm) / 10.0, 2.0 * ell_mm.b / 10.0, ell_px


def abdomen_biometrics(mask, spacing_mm):
    """Return ``(ac_cm, ellipse_px)`` for an abdomen mask in original pixel space."""
    ell_px, ell_mm = _fit_physical(mask, spacing_mm)
    return ellipse_perimeter(ell_mm) / 10.0, ell_px
