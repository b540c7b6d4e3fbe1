"""Data model, dataset directory I/O, intensity normalisation and resizing.

Dataset layout::

    <root>/manifest.csv
    <root>/<study_id>/head.png       head_mask.png
    <root>/<study_id>/abdomen.png    abdomen_mask.png
    <root>/<study_id>/femur.png

All coordinates are ``(row, col)`` with the origin at the top-left pixel
centre.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.transform import resize

PLANES = ("head", "abdomen", "femur")
MASKED_PLANES = ("head", "abdomen")
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = [
    "study_id", "plane", "row_mm_per_px", "col_mm_per_px",
    "femur_p1_row", "femur_p1_col", "femur_p2_row", "femur_p2_col",
]
MODEL_SIDE = 256


class DatasetError(ValueError):
    """Malformed dataset directory or manifest."""


@dataclass
class UltrasoundImage:
    pixels: np.ndarray
    spacing_mm: tuple[float, float]
    plane_tag: str
    study_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 8:
            raise ValueError(f"image must be 2-D and at least 8x8, got {self.pixels.shape}")
        sr, sc = (float(s) for s in self.spacing_mm)
        if not (sr > 0 and sc > 0):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        self.spacing_mm = (sr, sc)
        if self.plane_tag not in PLANES:
            raise ValueError(f"unknown plane {self.plane_tag!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class SegmentationMask:
    pixels: np.ndarray
    structure: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != bool:
            if not np.isin(px, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            px = px.astype(bool)
        self.pixels = px
        if self.structure not in MASKED_PLANES:
            raise ValueError(f"unknown structure {self.structure!r}")


@dataclass(frozen=True)
class FemurAnnotation:
    p1: tuple[float, float]
    p2: tuple[float, float]

    def __post_init__(self):
        if tuple(self.p1) == tuple(self.p2):
            raise ValueError("femur endpoints coincide")

    def check_bounds(self, shape):
        h, w = shape
        for p in (self.p1, self.p2):
            if not (0 <= p[0] <= h - 1 and 0 <= p[1] <= w - 1):
                raise ValueError(f"endpoint {p} outside image of shape {shape}")


@dataclass
class StudyRecord:
    study_id: str
    head_image: UltrasoundImage | None = None
    head_mask: SegmentationMask | None = None
    abdomen_image: UltrasoundImage | None = None
    abdomen_mask: SegmentationMask | None = None
    femur_image: UltrasoundImage | None = None
    femur_annotation: FemurAnnotation | None = None
    errors: dict[str, str] = field(default_factory=dict)

    def image(self, plane: str) -> UltrasoundImage | None:
        return getattr(self, f"{plane}_image")

    def mask(self, plane: str) -> SegmentationMask | None:
        return getattr(self, f"{plane}_mask")

    @property
    def planes(self) -> list[str]:
        return [p for p in PLANES if self.image(p) is not None]


# ------------------------------------------------------------------ I/O


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG as float64 (raw values, not rescaled)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B", "I;16L"):
            im = im.convert("L")
        return np.asarray(im).astype(np.float64)


def write_png(path, pixels: np.ndarray, bits: int = 8):
    """Write values in [0, 1] as an 8- or 16-bit grayscale PNG."""
    top = 255 if bits == 8 else 65535
    arr = np.round(np.clip(pixels, 0.0, 1.0) * top)
    arr = arr.astype(np.uint8 if bits == 8 else np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    top = raw.max()
    if top <= 0:
        return np.zeros(raw.shape, dtype=bool)
    return raw >= 0.5 * top


def _parse_float(text: str, what: str) -> float | None:
    text = (text or "").strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"{what}: cannot parse {text!r} as a number") from None


def read_manifest(path) -> dict[tuple[str, str], dict]:
    """Parse ``manifest.csv`` into ``{(study_id, plane): row}``."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{path}: manifest lacks columns {sorted(missing)}")
        for raw in reader:
            sid, plane = raw["study_id"].strip(), raw["plane"].strip()
            if plane not in PLANES:
                raise DatasetError(f"study {sid}: unknown plane {plane!r}")
            where = f"study {sid}, plane {plane}"
            row = {k: _parse_float(raw[k], f"{where}, field {k}") for k in MANIFEST_HEADER[2:]}
            for k in ("row_mm_per_px", "col_mm_per_px"):
                if row[k] is None or not row[k] > 0:
                    raise DatasetError(f"{where}: field {k} must be > 0, got {raw[k]!r}")
            rows[(sid, plane)] = row
    return rows


def write_manifest(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in MANIFEST_HEADER})


def load_study(root, study_id: str, manifest: dict | None = None) -> StudyRecord:
    """Load one study directory. Missing masks or annotations leave empty slots."""
    root = Path(root)
    if manifest is None:
        manifest = read_manifest(root / MANIFEST_NAME)
    rec = StudyRecord(study_id)
    sdir = root / study_id
    for plane in PLANES:
        img_path = sdir / f"{plane}.png"
        if not img_path.exists():
            continue
        row = manifest.get((study_id, plane))
        if row is None:
            raise DatasetError(f"{img_path}: no manifest row for study {study_id}, plane {plane}")
        spacing = (row["row_mm_per_px"], row["col_mm_per_px"])
        img = UltrasoundImage(read_png(img_path), spacing, plane, study_id)
        setattr(rec, f"{plane}_image", img)
        if plane in MASKED_PLANES:
            mpath = sdir / f"{plane}_mask.png"
            if mpath.exists():
                m = binarize_mask(read_png(mpath))
                if m.shape != img.shape:
                    raise DatasetError(f"{mpath}: shape {m.shape} differs from image {img.shape}")
                setattr(rec, f"{plane}_mask", SegmentationMask(m, plane))
        else:
            coords = [row[k] for k in MANIFEST_HEADER[4:]]
            if all(c is not None for c in coords):
                ann = FemurAnnotation((coords[0], coords[1]), (coords[2], coords[3]))
                ann.check_bounds(img.shape)
                rec.femur_annotation = ann
    return rec


def list_study_ids(root) -> list[str]:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def load_study_dir(path) -> list[StudyRecord]:
    """Load every study under ``path``, sorted by study id."""
    root = Path(path)
    manifest = read_manifest(root / MANIFEST_NAME)
    return [load_study(root, sid, manifest) for sid in list_study_ids(root)]


# ------------------------------------------------------- preprocessing


def normalize_intensity(image: UltrasoundImage) -> UltrasoundImage:
    """Min-max rescale to [0, 1]; a constant image becomes all zeros."""
    px = np.asarray(image.pixels, dtype=np.float64)
    if not np.isfinite(px).all():
        raise ValueError(f"non-finite pixel values in {image.study_id or 'image'}")
    lo, hi = px.min(), px.max()
    out = np.zeros_like(px) if hi == lo else (px - lo) / (hi - lo)
    return replace(image, pixels=out)


def resize_to_model(image: UltrasoundImage, mask: SegmentationMask | None = None,
                    target: int = MODEL_SIDE):
    """Resample to ``target x target``.

    Returns ``(image, mask_or_None, (sr, sc))`` where ``sr = H / target`` and
    ``sc = W / target``. The image is bilinear, the mask nearest-neighbour.
    The returned image keeps the original spacing; use
    :func:`to_original_coords` to map model-space geometry back.
    """
    if target < 8:
        raise ValueError("target side must be >= 8")
    h, w = image.shape
    scale = (h / target, w / target)
    px = resize(np.asarray(image.pixels, dtype=np.float64), (target, target), order=1,
                mode="edge", anti_aliasing=False, preserve_range=True)
    out = replace(image, pixels=px)
    out_mask = None
    if mask is not None:
        m = resize(mask.pixels.astype(np.uint8), (target, target), order=0, mode="edge",
                   anti_aliasing=False, preserve_range=True)
        out_mask = SegmentationMask(m.astype(bool), mask.structure)
    return out, out_mask, scale


def to_original_coords(points, scale) -> np.ndarray:
    """Map model-space ``(row, col)`` coordinates back to the original grid.

    Uses the pixel-centre convention of the resampler:
    ``orig = (model + 0.5) * s - 0.5``.
    """
    pts = np.asarray(points, dtype=np.float64)
    return (pts + 0.5) * np.asarray(scale, dtype=np.float64) - 0.5


def to_model_coords(points, scale) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return (pts + 0.5) / np.asarray(scale, dtype=np.float64) - 0.5


def is_isotropic(spacing_mm, rtol: float = 1e-9) -> bool:
    sr, sc = spacing_mm
    return math.isclose(sr, sc, rel_tol=rtol)
