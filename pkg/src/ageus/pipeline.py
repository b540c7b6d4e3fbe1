"""End-to-end estimation: segment / localise -> measure -> gestational age.

Networks run at model resolution; every measurement is taken in the
original pixel grid of each image so that its own spacing applies.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from skimage.transform import resize

from . import nets
from .core import (
    MANIFEST_NAME,
    MODEL_SIDE,
    SegmentationMask,
    StudyRecord,
    UltrasoundImage,
    list_study_ids,
    load_study,
    normalize_intensity,
    read_manifest,
    resize_to_model,
    to_original_coords,
    write_png,
)
from .femur import (
    OPENING_RADIUS,
    SIGMA_PX,
    START_PERCENTILE,
    EndpointPair,
    EndpointsNotSeparable,
    femur_length,
    locate_endpoints,
    postprocess_map,
)
from .ga import hadlock_ga, validate_biometrics
from .geometry import BiometricSet, GeometryError, abdomen_biometrics, head_biometrics

REPORT_HEADER = ["study_id", "hc_cm", "bpd_cm", "ac_cm", "fl_cm", "ga_weeks", "warnings"]
MEASURES = ("hc_cm", "bpd_cm", "ac_cm", "fl_cm", "ga_weeks")


@dataclass
class FemurParams:
    sigma: float = SIGMA_PX
    percentile: float = START_PERCENTILE
    radius: int = OPENING_RADIUS


@dataclass
class StudyEstimate:
    study_id: str
    biometrics: BiometricSet = field(default_factory=BiometricSet)
    ga_weeks: float | None = None
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    def row(self) -> dict:
        b = self.biometrics
        notes = list(self.warnings)
        if self.error:
            notes.insert(0, f"error: {self.error}")
        vals = {"hc_cm": b.hc_cm, "bpd_cm": b.bpd_cm, "ac_cm": b.ac_cm, "fl_cm": b.fl_cm,
                "ga_weeks": self.ga_weeks}
        out = {"study_id": self.study_id, "warnings": "; ".join(notes)}
        out.update({k: "" if v is None else repr(float(v)) for k, v in vals.items()})
        return out


# ------------------------------------------------------------ inference


@torch.no_grad()
def segment(model: nets.SharedUNet, image: UltrasoundImage, branch: str,
            side: int = MODEL_SIDE) -> SegmentationMask:
    """Predict a mask in the image's original pixel grid.

    The foreground probability is resampled bilinearly back to the original
    size and thresholded at 0.5.
    """
    model.eval()
    small, _, _ = resize_to_model(normalize_intensity(image), None, side)
    x = torch.from_numpy(small.pixels.astype(np.float32))[None, None]
    prob = model(x, branch).softmax(1)[0, 1].numpy().astype(np.float64)
    full = resize(prob, image.shape, order=1, mode="edge", anti_aliasing=False)
    return SegmentationMask(full > 0.5, branch)


@torch.no_grad()
def predict_distance_map(model: nets.FemurUNet, image: UltrasoundImage, side: int = MODEL_SIDE):
    """Clamped model-resolution map plus the ``(sr, sc)`` scale back to the image."""
    model.eval()
    small, _, scale = resize_to_model(normalize_intensity(image), None, side)
    x = torch.from_numpy(small.pixels.astype(np.float32))[None, None]
    return model.predict(x)[0, 0].numpy().astype(np.float64), scale


def localize_femur(model: nets.FemurUNet, image: UltrasoundImage, side: int = MODEL_SIDE,
                   params: FemurParams | None = None) -> EndpointPair:
    """Endpoints in original pixel coordinates with FL filled in."""
    params = params or FemurParams()
    dmap, scale = predict_distance_map(model, image, side)
    dmap = postprocess_map(dmap, params.sigma, params.radius, params.percentile)
    pair = locate_endpoints(dmap, params.percentile, params.radius)
    p = to_original_coords(pair.as_array(), scale)
    p1, p2 = tuple(map(float, p[0])), tuple(map(float, p[1]))
    return EndpointPair(p1, p2, femur_length((p1, p2), image.spacing_mm))


# ------------------------------------------------------------ estimation


def _finish(est: StudyEstimate) -> StudyEstimate:
    b = est.biometrics
    est.warnings.extend(w for w in validate_biometrics(b) if w not in est.warnings)
    b.warnings = list(est.warnings)
    if b.complete:
        est.ga_weeks = hadlock_ga(*b.as_tuple())
    return est


def oracle_biometrics(rec: StudyRecord) -> StudyEstimate:
    """Measure the ground-truth masks and femur annotation (networks bypassed)."""
    est = StudyEstimate(rec.study_id)
    missing = [p for p in ("head", "abdomen", "femur") if rec.image(p) is None]
    if missing:
        est.error = f"missing plane {', '.join(missing)}"
        return est
    if rec.head_mask is None or rec.abdomen_mask is None or rec.femur_annotation is None:
        est.error = "ground truth incomplete (mask or femur annotation absent)"
        return est
    b = est.biometrics
    b.hc_cm, b.bpd_cm, _ = head_biometrics(rec.head_mask, rec.head_image.spacing_mm)
    b.ac_cm, _ = abdomen_biometrics(rec.abdomen_mask, rec.abdomen_image.spacing_mm)
    b.fl_cm = femur_length(rec.femur_annotation, rec.femur_image.spacing_mm)
    return _finish(est)


def estimate_study(rec: StudyRecord, seg_model: nets.SharedUNet, femur_model: nets.FemurUNet,
                   side: int = MODEL_SIDE, femur_params: FemurParams | None = None,
                   return_masks: bool = False):
    """Full learned pipeline on one study.

    Failures are reported on the returned estimate rather than raised.
    With ``return_masks=True`` also returns the predicted masks by plane.
    """
    est = StudyEstimate(rec.study_id)
    masks: dict[str, SegmentationMask] = {}
    missing = [p for p in ("head", "abdomen", "femur") if rec.image(p) is None]
    if missing:
        est.error = f"missing plane {', '.join(missing)}"
        return (est, masks) if return_masks else est
    b = est.biometrics
    try:
        masks["head"] = segment(seg_model, rec.head_image, "head", side)
        b.hc_cm, b.bpd_cm, _ = head_biometrics(masks["head"], rec.head_image.spacing_mm)
    except GeometryError as exc:
        est.warnings.append(f"head: {exc}")
    try:
        masks["abdomen"] = segment(seg_model, rec.abdomen_image, "abdomen", side)
        b.ac_cm, _ = abdomen_biometrics(masks["abdomen"], rec.abdomen_image.spacing_mm)
    except GeometryError as exc:
        est.warnings.append(f"abdomen: {exc}")
    try:
        b.fl_cm = localize_femur(femur_model, rec.femur_image, side, femur_params).fl_cm
    except EndpointsNotSeparable as exc:
        est.warnings.append(f"femur: {exc}")
    _finish(est)
    return (est, masks) if return_masks else est


def iter_studies(root, only=None):
    """Yield ``(study_id, record_or_exception)``; a broken study never stops the loop."""
    root = Path(root)
    manifest = read_manifest(root / MANIFEST_NAME)
    for sid in list_study_ids(root):
        if only is not None and sid not in only:
            continue
        try:
            yield sid, load_study(root, sid, manifest)
        except Exception as exc:  # corrupt files, bad manifest rows, ...
            yield sid, exc


def estimate_dir(root, seg_model=None, femur_model=None, oracle: bool = False,
                 side: int = MODEL_SIDE, femur_params: FemurParams | None = None,
                 mask_dir=None, only=None) -> list[StudyEstimate]:
    """Estimate every study under ``root`` (or only the ids in ``only``)."""
    out = []
    for sid, rec in iter_studies(root, only):
        if isinstance(rec, Exception):
            out.append(StudyEstimate(sid, error=f"study {sid}: {rec}"))
            continue
        try:
            if oracle:
                out.append(oracle_biometrics(rec))
                continue
            est, masks = estimate_study(rec, seg_model, femur_model, side, femur_params,
                                        return_masks=True)
            if mask_dir is not None:
                for plane, m in masks.items():
                    write_png(Path(mask_dir) / sid / f"{plane}_mask.png",
                              m.pixels.astype(np.float64))
            out.append(est)
        except Exception as exc:
            out.append(StudyEstimate(sid, error=f"study {sid}: {exc}"))
    return out


# ---------------------------------------------------------------- report


def write_report(path, estimates: list[StudyEstimate]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_HEADER)
        w.writeheader()
        for est in sorted(estimates, key=lambda e: e.study_id):
            w.writerow(est.row())
    return path


def read_report(path) -> dict[str, dict]:
    """``{study_id: {measure: float | nan, "warnings": str}}``."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {reader.fieldnames}")
        for row in reader:
            rec = {k: float(row[k]) if row[k].strip() else math.nan for k in MEASURES}
            rec["warnings"] = row["warnings"]
            out[row["study_id"]] = rec
    return out
