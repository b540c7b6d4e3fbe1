"""Synthetic ultrasound phantoms with known geometry.

Each generator draws a structure in pixel units, then picks the pixel
spacing so that the physical measurement lands on a target value drawn
from a realistic third-trimester range. Images get multiplicative,
spatially correlated Rayleigh speckle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    MANIFEST_NAME,
    FemurAnnotation,
    SegmentationMask,
    UltrasoundImage,
    write_manifest,
    write_png,
)
from .geometry import EllipseParams, ellipse_perimeter


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 256
    head_a_px: tuple[float, float] = (72.0, 100.0)
    head_axis_ratio: tuple[float, float] = (0.78, 0.88)
    head_hc_cm: tuple[float, float] = (26.0, 34.0)
    abdomen_a_px: tuple[float, float] = (75.0, 105.0)
    abdomen_axis_ratio: tuple[float, float] = (0.82, 0.95)
    abdomen_ac_cm: tuple[float, float] = (24.0, 34.0)
    femur_length_px: tuple[float, float] = (100.0, 170.0)
    femur_thickness_px: tuple[float, float] = (6.0, 10.0)
    femur_fl_cm: tuple[float, float] = (5.0, 6.9)
    head_contrast: float = 0.85
    abdomen_contrast: float = 0.45
    femur_contrast: float = 0.95
    background: float = 0.10
    speckle: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 64:
            raise ValueError("image_size must be at least 64")
        for name in ("head_a_px", "head_axis_ratio", "head_hc_cm", "abdomen_a_px",
                     "abdomen_axis_ratio", "abdomen_ac_cm", "femur_length_px",
                     "femur_thickness_px", "femur_fl_cm"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) range")
        if not self.abdomen_contrast < self.head_contrast:
            raise ValueError("abdomen boundary contrast must be lower than the head's")
        if max(self.head_a_px[1], self.abdomen_a_px[1]) * 2 + 8 > self.image_size:
            raise ValueError("ellipse ranges do not fit in the image")


def _uniform(rng, bounds):
    return float(rng.uniform(*bounds))


def speckle(img: np.ndarray, rng, strength: float = 1.0) -> np.ndarray:
    """``img * (0.5 + R)`` with R a smoothed Rayleigh field of mean 0.5.

    ``strength`` scales the fluctuation of R around its mean; 0 disables it.
    """
    if strength <= 0:
        return np.clip(img, 0.0, 1.0)
    r = ndimage.gaussian_filter(rng.rayleigh(1.0, img.shape), 0.8)
    r *= 0.5 / r.mean()
    r = 0.5 + strength * (r - 0.5)
    return np.clip(img * (0.5 + r), 0.0, 1.0)


def _texture(rng, shape, scale=6.0, amp=0.05):
    t = ndimage.gaussian_filter(rng.standard_normal(shape), scale)
    return amp * t / max(t.std(), 1e-12)


def _ellipse_coords(e: EllipseParams, shape):
    rows, cols = np.indices(shape, dtype=np.float64)
    dr, dc = rows - e.center[0], cols - e.center[1]
    ct, st = math.cos(e.theta), math.sin(e.theta)
    u = dc * ct + dr * st
    v = -dc * st + dr * ct
    rho = np.sqrt((u / e.a) ** 2 + (v / e.b) ** 2)
    grad = np.hypot(u / (e.a**2), v / (e.b**2)) / np.maximum(rho, 1e-9)
    # first-order signed distance to the curve (negative inside)
    return u, v, (rho - 1.0) / np.maximum(grad, 1e-9)


def _random_ellipse(rng, spec: PhantomSpec, a_range, ratio_range) -> EllipseParams:
    a = _uniform(rng, a_range)
    b = a * _uniform(rng, ratio_range)
    theta = float(rng.uniform(0, math.pi))
    margin = a + 4
    size = spec.image_size
    c = rng.uniform(margin, size - 1 - margin, 2)
    return EllipseParams.make((c[0], c[1]), a, b, theta)


def _filled(e: EllipseParams, shape) -> np.ndarray:
    rows, cols = np.indices(shape, dtype=np.float64)
    return e.contains(rows, cols)


def _spacing_for(length_px: float, target_cm: float) -> float:
    return target_cm * 10.0 / length_px


def gen_head(spec: PhantomSpec, rng):
    """Head plane: bright skull ring, midline echo and textured interior."""
    shape = (spec.image_size, spec.image_size)
    e = _random_ellipse(rng, spec, spec.head_a_px, spec.head_axis_ratio)
    u, v, sd = _ellipse_coords(e, shape)
    inside = _filled(e, shape)
    thick = rng.uniform(3.0, 5.0)
    img = spec.background + _texture(rng, shape)
    img = np.where(inside, 0.22 + _texture(rng, shape, 3.0, 0.04), img)
    # midline falx along the major axis
    midline = np.exp(-(v / 1.2) ** 2) * (np.abs(u) < 0.8 * e.a) * inside
    img = img + 0.25 * midline
    img = img + spec.head_contrast * np.exp(-((sd / (thick / 2)) ** 2))
    img = speckle(np.clip(img, 0, 1), rng, spec.speckle)
    spacing = _spacing_for(ellipse_perimeter(e), _uniform(rng, spec.head_hc_cm))
    return (UltrasoundImage(img, (spacing, spacing), "head"),
            SegmentationMask(inside, "head"), e)


def gen_abdomen(spec: PhantomSpec, rng):
    """Abdominal plane: faint boundary, dark stomach bubble, bright spine."""
    shape = (spec.image_size, spec.image_size)
    e = _random_ellipse(rng, spec, spec.abdomen_a_px, spec.abdomen_axis_ratio)
    u, v, sd = _ellipse_coords(e, shape)
    inside = _filled(e, shape)
    img = spec.background + 0.05 + _texture(rng, shape, 5.0, 0.06)
    img = np.where(inside, 0.30 + _texture(rng, shape, 4.0, 0.05), img)
    thick = rng.uniform(3.0, 6.0)
    img = img + spec.abdomen_contrast * np.exp(-((sd / (thick / 2)) ** 2))
    rows, cols = np.indices(shape, dtype=np.float64)
    ct, st = math.cos(e.theta), math.sin(e.theta)

    def at(fu, fv):  # interior point in ellipse-frame fractions
        pu, pv = fu * e.a, fv * e.b
        return e.center[0] + pu * st + pv * ct, e.center[1] + pu * ct - pv * st

    sr, sc = at(rng.uniform(-0.35, 0.35), rng.uniform(-0.4, 0.1))
    srad = rng.uniform(0.12, 0.22) * e.b
    stomach = (rows - sr) ** 2 + (cols - sc) ** 2 <= srad**2
    img = np.where(stomach, 0.04, img)
    pr, pc = at(rng.uniform(-0.2, 0.2), 0.72)
    img = img + 0.6 * np.exp(-((rows - pr) ** 2 + (cols - pc) ** 2) / (2 * 3.0**2))
    for _ in range(int(rng.integers(1, 4))):
        br, bc = at(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6))
        img = img + rng.uniform(-0.1, 0.1) * np.exp(
            -((rows - br) ** 2 + (cols - bc) ** 2) / (2 * rng.uniform(4, 10) ** 2))
    img = speckle(np.clip(img, 0, 1), rng, spec.speckle)
    spacing = _spacing_for(ellipse_perimeter(e), _uniform(rng, spec.abdomen_ac_cm))
    return (UltrasoundImage(img, (spacing, spacing), "abdomen"),
            SegmentationMask(inside, "abdomen"), e)


def gen_femur(spec: PhantomSpec, rng):
    """Femur plane: bright rounded bar between two endpoints, with an acoustic shadow."""
    size = spec.image_size
    shape = (size, size)
    length = _uniform(rng, spec.femur_length_px)
    length = min(length, size - 30.0)
    angle = rng.uniform(-math.pi / 4, math.pi / 4)
    dr, dc = math.sin(angle) * length, math.cos(angle) * length
    margin = 14.0
    r0 = rng.uniform(margin, size - 1 - margin - abs(dr)) + (abs(dr) if dr < 0 else 0.0)
    c0 = rng.uniform(margin, size - 1 - margin - abs(dc))
    p1 = (float(r0), float(c0))
    p2 = (float(r0 + dr), float(c0 + dc))
    thick = _uniform(rng, spec.femur_thickness_px)

    rows, cols = np.indices(shape, dtype=np.float64)
    vr, vc = p2[0] - p1[0], p2[1] - p1[1]
    t = np.clip(((rows - p1[0]) * vr + (cols - p1[1]) * vc) / (vr * vr + vc * vc), 0, 1)
    dist = np.hypot(rows - (p1[0] + t * vr), cols - (p1[1] + t * vc))
    img = spec.background + 0.08 + _texture(rng, shape, 6.0, 0.06)
    # soft-tissue streaks unrelated to the bone
    for _ in range(int(rng.integers(1, 3))):
        ang = rng.uniform(0, math.pi)
        off = rng.uniform(-size / 2, size / 2)
        d = (cols - size / 2) * math.sin(ang) - (rows - size / 2) * math.cos(ang) - off
        img = img + 0.2 * np.exp(-(d / 2.0) ** 2)
    # shadow below the shaft (larger row index)
    along = ((rows - p1[0]) * vr + (cols - p1[1]) * vc) / (vr * vr + vc * vc)
    below = (rows - (p1[0] + along * vr)) > thick / 2
    shadow = below & (along > 0.05) & (along < 0.95)
    img = np.where(shadow, img * 0.45, img)
    img = img + spec.femur_contrast * np.exp(-((dist / (thick / 2)) ** 4))
    img = speckle(np.clip(img, 0, 1), rng, spec.speckle)
    spacing = _spacing_for(length, _uniform(rng, spec.femur_fl_cm))
    return UltrasoundImage(img, (spacing, spacing), "femur"), FemurAnnotation(p1, p2)


def study_rng(spec: PhantomSpec, index: int):
    return np.random.default_rng([spec.seed, index])


def gen_study(spec: PhantomSpec, index: int) -> dict:
    rng = study_rng(spec, index)
    head = gen_head(spec, rng)
    abdomen = gen_abdomen(spec, rng)
    femur = gen_femur(spec, rng)
    return {"head": head, "abdomen": abdomen, "femur": femur}


def gen_dataset(spec: PhantomSpec, n_studies: int, out_dir, prefix: str = "S") -> Path:
    """Write ``n_studies`` complete synthetic studies in the dataset layout.

    Returns the manifest path.
    """
    if n_studies < 1:
        raise ValueError("n_studies must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    width = max(4, len(str(n_studies - 1)))
    for i in range(n_studies):
        sid = f"{prefix}{i:0{width}d}"
        st = gen_study(spec, i)
        sdir = out / sid
        for plane in ("head", "abdomen"):
            img, mask, _ = st[plane]
            write_png(sdir / f"{plane}.png", img.pixels)
            write_png(sdir / f"{plane}_mask.png", mask.pixels.astype(np.float64))
            rows.append({"study_id": sid, "plane": plane,
                         "row_mm_per_px": repr(img.spacing_mm[0]),
                         "col_mm_per_px": repr(img.spacing_mm[1])})
        img, ann = st["femur"]
        write_png(sdir / "femur.png", img.pixels)
        rows.append({"study_id": sid, "plane": "femur",
                     "row_mm_per_px": repr(img.spacing_mm[0]),
                     "col_mm_per_px": repr(img.spacing_mm[1]),
                     "femur_p1_row": repr(ann.p1[0]), "femur_p1_col": repr(ann.p1[1]),
                     "femur_p2_row": repr(ann.p2[0]), "femur_p2_col": repr(ann.p2[1])})
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, rows)
    return manifest
