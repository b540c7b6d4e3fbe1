"""Evaluation reports: biometric errors, segmentation summaries, paired comparisons."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .core import MANIFEST_NAME, MASKED_PLANES, binarize_mask, read_manifest, read_png
from .metrics import (
    HIGHER_BETTER,
    LOWER_BETTER,
    ErrorReport,
    MetricSummary,
    dice,
    error_report,
    hausdorff_mm,
    ks_normality,
    summarize,
    wilcoxon_signed_rank,
)
from .pipeline import MEASURES

MEASURE_LABELS = {"hc_cm": "HC (cm)", "bpd_cm": "BPD (cm)", "ac_cm": "AC (cm)",
                  "fl_cm": "FL (cm)", "ga_weeks": "GA (weeks)"}
ALPHA = 0.05


def _paired(pred: dict, truth: dict, key: str):
    ids = sorted(set(pred) & set(truth))
    pairs = [(s, pred[s][key], truth[s][key]) for s in ids]
    return [(s, p, t) for s, p, t in pairs if not (math.isnan(p) or math.isnan(t))]


def biometric_errors(pred: dict, truth: dict) -> dict[str, tuple[int, ErrorReport | None]]:
    """Per-measure ``(n, ErrorReport)`` over studies with both values present."""
    out = {}
    for key in MEASURES:
        pairs = _paired(pred, truth, key)
        if not pairs:
            out[key] = (0, None)
            continue
        _, p, t = zip(*pairs)
        out[key] = (len(pairs), error_report(p, t))
    return out


def _load_mask(path):
    return binarize_mask(read_png(path))


def segmentation_scores(pred_mask_dir, truth_root) -> dict[str, dict[str, dict[str, float]]]:
    """``{structure: {study_id: {"dice": .., "hausdorff_mm": ..}}}``."""
    pred_mask_dir, truth_root = Path(pred_mask_dir), Path(truth_root)
    manifest = read_manifest(truth_root / MANIFEST_NAME)
    out: dict[str, dict[str, dict[str, float]]] = {p: {} for p in MASKED_PLANES}
    for plane in MASKED_PLANES:
        for tpath in sorted(truth_root.glob(f"*/{plane}_mask.png")):
            sid = tpath.parent.name
            ppath = pred_mask_dir / sid / f"{plane}_mask.png"
            if not ppath.exists() or (sid, plane) not in manifest:
                continue
            truth, pred = _load_mask(tpath), _load_mask(ppath)
            row = manifest[(sid, plane)]
            spacing = (row["row_mm_per_px"], row["col_mm_per_px"])
            hd = hausdorff_mm(pred, truth, spacing) if pred.any() and truth.any() else math.inf
            out[plane][sid] = {"dice": dice(pred, truth), "hausdorff_mm": hd}
    return out


def summarize_segmentation(scores) -> dict[str, dict[str, MetricSummary]]:
    out = {}
    for plane, per_study in scores.items():
        if not per_study:
            continue
        d = [v["dice"] for v in per_study.values()]
        h = [v["hausdorff_mm"] for v in per_study.values()]
        out[plane] = {"dice": summarize(d, HIGHER_BETTER),
                      "hausdorff_mm": summarize(h, LOWER_BETTER)}
    return out


def paired_test(a, b) -> dict:
    """KS normality of the paired differences, then Wilcoxon signed-rank."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    res = {"n": int(a.size), "ks_stat": math.nan, "ks_p": math.nan,
           "wilcoxon_stat": math.nan, "wilcoxon_p": math.nan, "significant": False}
    diff = a - b
    try:
        res["ks_stat"], res["ks_p"] = ks_normality(diff)
    except ValueError:
        pass
    try:
        res["wilcoxon_stat"], res["wilcoxon_p"] = wilcoxon_signed_rank(a, b)
        res["significant"] = bool(res["wilcoxon_p"] < ALPHA)
    except ValueError:
        pass
    return res


def compare_reports(pred_a: dict, pred_b: dict, truth: dict) -> dict[str, dict]:
    """Paired comparison of absolute errors of two prediction reports."""
    out = {}
    for key in MEASURES:
        ids = sorted(set(pred_a) & set(pred_b) & set(truth))
        ea, eb = [], []
        for s in ids:
            va, vb, vt = pred_a[s][key], pred_b[s][key], truth[s][key]
            if any(math.isnan(v) for v in (va, vb, vt)):
                continue
            ea.append(abs(va - vt))
            eb.append(abs(vb - vt))
        out[key] = paired_test(ea, eb)
    return out


def compare_segmentation(scores_a, scores_b) -> dict[str, dict]:
    out = {}
    for plane in MASKED_PLANES:
        ids = sorted(set(scores_a.get(plane, {})) & set(scores_b.get(plane, {})))
        for metric in ("dice", "hausdorff_mm"):
            a = [scores_a[plane][s][metric] for s in ids]
            b = [scores_b[plane][s][metric] for s in ids]
            out[f"{plane}/{metric}"] = paired_test(a, b)
    return out


# --------------------------------------------------------------- writing


def _fmt(v, nd=3):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.{nd}f}"


def render_tables(errors=None, seg=None, comparison=None) -> str:
    lines = []
    if seg:
        for plane, summ in seg.items():
            lines.append(f"{plane.capitalize()} plane segmentation")
            lines.append(f"  {'':<14}{'Median [IQR]':<28}{'5%-worst':>10}")
            for metric, label in (("dice", "Dice"), ("hausdorff_mm", "Hausdorff (mm)")):
                s = summ[metric]
                lines.append(f"  {label:<14}{_fmt(s.median)} [{_fmt(s.iqr_low)}, {_fmt(s.iqr_high)}]"
                             .ljust(44) + f"{_fmt(s.worst5):>10}")
            lines.append("")
    if errors:
        lines.append("Biometric measures")
        lines.append(f"  {'':<12}{'n':>4}{'MAE':>9}{'MSE':>9}{'RMSE':>9}{'MAPE':>9}")
        for key, (n, rep) in errors.items():
            if rep is None:
                lines.append(f"  {MEASURE_LABELS[key]:<12}{n:>4}" + f"{'-':>9}" * 4)
                continue
            lines.append(f"  {MEASURE_LABELS[key]:<12}{n:>4}{rep.mae:>9.3f}{rep.mse:>9.3f}"
                         f"{rep.rmse:>9.3f}{rep.mape:>9.3f}")
        lines.append("")
    if comparison:
        lines.append(f"Paired comparison (Wilcoxon signed-rank, alpha = {ALPHA})")
        lines.append(f"  {'':<22}{'n':>4}{'KS p':>9}{'W':>9}{'p':>9}  significant")
        for key, r in comparison.items():
            label = MEASURE_LABELS.get(key, key)
            lines.append(f"  {label:<22}{r['n']:>4}{_fmt(r['ks_p']):>9}"
                         f"{_fmt(r['wilcoxon_stat'], 1):>9}{_fmt(r['wilcoxon_p'], 4):>9}"
                         f"  {'yes' if r['significant'] else 'no'}")
        lines.append("")
    return "\n".join(lines)


def write_evaluation(out_dir, errors=None, seg=None, comparison=None) -> Path:
    """Write ``biometrics.csv``, ``segmentation.csv``, ``comparison.csv`` and ``report.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if errors is not None:
        with open(out / "biometrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["measure", "n", "mae", "mse", "rmse", "mape"])
            for key, (n, rep) in errors.items():
                vals = [""] * 4 if rep is None else [rep.mae, rep.mse, rep.rmse, rep.mape]
                w.writerow([key, n, *vals])
    if seg is not None:
        with open(out / "segmentation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["structure", "metric", "median", "iqr_low", "iqr_high", "worst5"])
            for plane, summ in seg.items():
                for metric, s in summ.items():
                    w.writerow([plane, metric, s.median, s.iqr_low, s.iqr_high, s.worst5])
    if comparison is not None:
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["n", "ks_stat", "ks_p", "wilcoxon_stat", "wilcoxon_p", "significant"]
            w.writerow(["measure", *cols])
            for key, r in comparison.items():
                w.writerow([key, *(r[c] for c in cols)])
    (out / "report.txt").write_text(render_tables(errors, seg, comparison))
    return out
