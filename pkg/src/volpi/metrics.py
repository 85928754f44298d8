"""Scoring of segmentations and predictive intervals, and report emission.

Sign convention: the coverage error is (empirical - target) * 100, so
under-coverage is negative. Wall time is carried in reports for context
but deliberately kept out of the CSV so identical runs stay byte-identical.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields
from statistics import NormalDist

import numpy as np

from volpi.calibration import empirical_coverage


def dsc(pred_labels, gt_labels, class_id: int) -> float:
    """Dice similarity 2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def mae(predicted_mL, truth_mL) -> float:
    """Mean absolute error between predicted mean volumes and truths."""
    pred = np.asarray(predicted_mL, dtype=float)
    truth = np.asarray(truth_mL, dtype=float)
    if pred.size == 0:
        raise ValueError("no records")
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def coverage_error(lowers, uppers, truths, target: float = 0.9) -> float:
    """Signed coverage error in percent: (empirical - target) * 100."""
    return (empirical_coverage(lowers, uppers, truths) - target) * 100.0


def mean_width(lowers, uppers) -> tuple[float, int]:
    """Mean (upper - lower) over finite intervals, plus the unbounded tally."""
    lowers = np.asarray(lowers, dtype=float)
    uppers = np.asarray(uppers, dtype=float)
    if lowers.size == 0:
        raise ValueError("no records")
    widths = uppers - lowers
    finite = np.isfinite(widths)
    n_unbounded = int((~finite).sum())
    if finite.any():
        return float(widths[finite].mean()), n_unbounded
    return float("nan"), n_unbounded


def cost_summary(records) -> tuple[float, float]:
    """(mean forward passes, mean wall seconds) over PI records."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    passes = np.mean([r.forward_passes for r in records])
    wall = np.mean([r.wall_time_s for r in records])
    return float(passes), float(wall)


def paired_width_ttest(widths_a, widths_b) -> tuple[float, float]:
    """Two-sided paired t statistic on per-case widths, normal-approximation
    p-value for n >= 30 (nan below that)."""
    a = np.asarray(widths_a, dtype=float)
    b = np.asarray(widths_b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length width samples (n >= 2)")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        return 0.0, 1.0 if a.size >= 30 else float("nan")
    t = float(d.mean() / (sd / np.sqrt(d.size)))
    if a.size < 30:
        return t, float("nan")
    p = 2.0 * (1.0 - NormalDist().cdf(abs(t)))
    return t, float(p)


@dataclass
class MethodClassResult:
    """One report row: a method scored on one foreground class."""

    method: str
    class_name: str
    n_cases: int
    delta_f_percent: float
    width_mL: float
    unbounded_count: int
    mae_mL: float
    dsc: float
    mean_forward_passes: float
    mean_wall_time_s: float

    CSV_FIELDS = (
        "method",
        "class_name",
        "n_cases",
        "delta_f_percent",
        "width_mL",
        "unbounded_count",
        "mae_mL",
        "dsc",
        "mean_forward_passes",
    )


def score_method_class(
    method: str,
    class_name: str,
    lowers,
    uppers,
    means,
    truths,
    dscs,
    records,
    target: float = 0.9,
) -> MethodClassResult:
    width, n_unb = mean_width(lowers, uppers)
    passes, wall = cost_summary(records)
    return MethodClassResult(
        method=method,
        class_name=class_name,
        n_cases=len(records),
        delta_f_percent=coverage_error(lowers, uppers, truths, target),
        width_mL=width,
        unbounded_count=n_unb,
        mae_mL=mae(means, truths),
        dsc=float(np.mean(dscs)),
        mean_forward_passes=passes,
        mean_wall_time_s=wall,
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_csv(rows: list[MethodClassResult]) -> str:
    """Deterministic CSV (no wall time) for method x class rows."""
    out = io.StringIO()
    out.write(",".join(MethodClassResult.CSV_FIELDS) + "\n")
    for row in rows:
        out.write(",".join(_fmt(getattr(row, f)) for f in MethodClassResult.CSV_FIELDS) + "\n")
    return out.getvalue()


def report_text(rows: list[MethodClassResult], extra_lines: list[str] | None = None) -> str:
    """Aligned, human-readable table grouped by class."""
    header = f"{'class':<12} {'method':<10} {'Δf (%)':>9} {'W (mL)':>10} {'MAE (mL)':>10} {'DSC':>7} {'passes':>7} {'wall (s)':>9}"
    lines = [header, "-" * len(header)]
    for cname in dict.fromkeys(r.class_name for r in rows):
        for r in rows:
            if r.class_name != cname:
                continue
            lines.append(
                f"{r.class_name:<12} {r.method:<10} {r.delta_f_percent:>9.2f} "
                f"{r.width_mL:>10.3f} {r.mae_mL:>10.3f} {r.dsc:>7.3f} "
                f"{r.mean_forward_passes:>7.1f} {r.mean_wall_time_s:>9.4f}"
            )
        lines.append("")
    if extra_lines:
        lines.extend(extra_lines)
    return "\n".join(lines).rstrip() + "\n"


def aggregate_runs(per_run_rows: list[list[MethodClassResult]]) -> str:
    """Across-run mean +/- SD CSV for repeated trainings of one setup."""
    if not per_run_rows:
        raise ValueError("no runs")
    numeric = [f.name for f in fields(MethodClassResult) if f.type in ("float", "int")]
    keys = [(r.method, r.class_name) for r in per_run_rows[0]]
    out = io.StringIO()
    cols = ["method", "class_name", "n_runs"]
    for name in numeric:
        cols += [f"{name}_mean", f"{name}_sd"]
    out.write(",".join(cols) + "\n")
    for method, cname in keys:
        cells = [method, cname, str(len(per_run_rows))]
        for name in numeric:
            vals = []
            for run_rows in per_run_rows:
                match = [r for r in run_rows if (r.method, r.class_name) == (method, cname)]
                if not match:
                    raise ValueError(f"run missing row for ({method}, {cname})")
                vals.append(float(getattr(match[0], name)))
            arr = np.asarray(vals)
            sd = arr.std(ddof=1) if len(arr) > 1 else 0.0
            cells += [_fmt(float(arr.mean())), _fmt(float(sd))]
        out.write(",".join(cells) + "\n")
    return out.getvalue()
