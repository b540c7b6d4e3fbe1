"""
Gestational age over the reference range
========================================

Evaluate the four-parameter Hadlock regression at the reference minima,
medians and maxima, and show how a missing or implausible input is flagged.
"""

from ageus.ga import HC_FL_COEF, REFERENCE_MEDIANS, REFERENCE_RANGES, hadlock_ga, validate_biometrics
from ageus.geometry import BiometricSet

keys = ("HC", "BPD", "AC", "FL")
lo = [REFERENCE_RANGES[k][0] for k in keys]
hi = [REFERENCE_RANGES[k][1] for k in keys]
med = [REFERENCE_MEDIANS[k] for k in keys]

for name, vals in (("minima", lo), ("medians", med), ("maxima", hi)):
    print(f"{name:>8}: {', '.join(f'{v:.3f}' for v in vals)} -> {hadlock_ga(*vals):.3f} weeks")

# each extra cm of femur adds 0.06 * HC weeks
print(f"dGA/dFL at the median HC: {HC_FL_COEF * med[0]:.2f} weeks per cm")

odd = BiometricSet(hc_cm=med[0], bpd_cm=med[1], ac_cm=250.0, fl_cm=None)
print("warnings:", validate_biometrics(odd))
