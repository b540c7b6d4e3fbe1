"""
Head and abdominal circumference from a mask
============================================

Draw a synthetic head plane, then measure it the way the pipeline does:
subpixel contour, direct ellipse fit, Ramanujan perimeter, spacing.
"""

import math

from ageus.geometry import ellipse_perimeter, head_biometrics
from ageus.synth import PhantomSpec, gen_study

study = gen_study(PhantomSpec(seed=4), 0)
image, mask, truth = study["head"]
spacing = image.spacing_mm[0]

# the generator picked the spacing so the true ellipse has this HC
hc_true = ellipse_perimeter(truth) * spacing / 10
print(f"true ellipse: a={truth.a:.2f}px b={truth.b:.2f}px theta={math.degrees(truth.theta):.1f}deg")
print(f"true HC {hc_true:.3f} cm, BPD {2 * truth.b * spacing / 10:.3f} cm")

hc, bpd, fitted = head_biometrics(mask, image.spacing_mm)
print(f"fitted ellipse: a={fitted.a:.2f}px b={fitted.b:.2f}px "
      f"theta={math.degrees(fitted.theta):.1f}deg residual={fitted.residual:.3g}")
print(f"measured HC {hc:.3f} cm ({100 * (hc - hc_true) / hc_true:+.3f}%), BPD {bpd:.3f} cm")

# Spacing is the only link to physical units: halve it and every length halves.
hc_half, _, _ = head_biometrics(mask, spacing / 2)
print(f"at half the spacing: HC {hc_half:.3f} cm")
