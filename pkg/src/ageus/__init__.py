"""Automated gestational age estimation from fetal ultrasound planes.

Head and abdomen are segmented by a shared-encoder, dual-decoder U-Net and
measured by ellipse fitting (HC, BPD, AC); femur endpoints are recovered
from a regressed distance map (FL); Hadlock's four-parameter equation turns
the four biometrics into gestational age.
"""
from .core import (
    FemurAnnotation,
    SegmentationMask,
    StudyRecord,
    UltrasoundImage,
    load_study_dir,
    normalize_intensity,
    resize_to_model,
)
from .femur import EndpointPair, femur_length, locate_endpoints, make_distance_map, postprocess_map
from .ga import hadlock_ga, validate_biometrics
from .geometry import (
    BiometricSet,
    EllipseParams,
    abdomen_biometrics,
    ellipse_perimeter,
    extract_contour,
    fit_ellipse,
    head_biometrics,
    px_to_cm,
)

__version__ = "0.1.0"
