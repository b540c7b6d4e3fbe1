"""Gestational age from HC, BPD, AC and FL (Hadlock, four parameters)."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import BiometricSet

INTERCEPT = 10.85
HC_FL_COEF = 0.060
BPD_COEF = 0.670
AC_COEF = 0.1680

# Observed [min, max] of manually measured biometrics in a third-trimester
# cohort (cm). Values outside [min / ENVELOPE_FACTOR, max * ENVELOPE_FACTOR]
# are flagged as implausible.
REFERENCE_RANGES = {
    "HC": (19.676, 34.267),
    "BPD": (5.315, 11.119),
    "AC": (12.332, 34.678),
    "FL": (4.299, 6.986),
}
REFERENCE_MEDIANS = {"HC": 30.514, "BPD": 8.644, "AC": 30.011, "FL": 6.232}
GA_RANGE = (21.560, 36.306)
ENVELOPE_FACTOR = 3.0


class IncompleteBiometricsError(ValueError):
    def __init__(self, missing):
        super().__init__(f"incomplete biometrics: missing {', '.join(missing)}")
        self.missing = list(missing)


@dataclass(frozen=True)
class GaEstimate:
    ga_weeks: float
    inputs: BiometricSet


def hadlock_ga(hc_cm, bpd_cm, ac_cm, fl_cm) -> float:
    """Gestational age in weeks. All inputs in centimetres."""
    values = {"HC": hc_cm, "BPD": bpd_cm, "AC": ac_cm, "FL": fl_cm}
    missing = [k for k, v in values.items() if v is None or (isinstance(v, float) and math.isnan(v))]
    if missing:
        raise IncompleteBiometricsError(missing)
    for k, v in values.items():
        if v < 0:
            raise ValueError(f"{k} must be non-negative, got {v}")
    hc, bpd, ac, fl = (float(v) for v in values.values())
    return INTERCEPT + HC_FL_COEF * hc * fl + BPD_COEF * bpd + AC_COEF * ac


def estimate_ga(b: BiometricSet) -> GaEstimate:
    return GaEstimate(hadlock_ga(*b.as_tuple()), b)


def validate_biometrics(b: BiometricSet) -> list[str]:
    """Plausibility warnings; never raises."""
    out = []
    for name, value in zip(("HC", "BPD", "AC", "FL"), b.as_tuple()):
        if value is None or (isinstance(value, float) and math.isnan(value)):
            out.append(f"{name} missing")
            continue
        lo, hi = REFERENCE_RANGES[name]
        lo, hi = lo / ENVELOPE_FACTOR, hi * ENVELOPE_FACTOR
        if not lo <= value <= hi:
            out.append(f"{name} = {value:.3f} cm outside plausible range [{lo:.3f}, {hi:.3f}]")
    return out
