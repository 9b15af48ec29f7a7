"""Evaluation measures for extracted centerlines and masks.

Distances are directional point-set distances between centerlines resampled
at 1 px arc spacing, plus the tip-to-tip error. Frames where extraction
produced nothing are flagged as failures and excluded from distance
statistics; they are counted separately.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .imagecore import BinaryMask, PixelSpacing, atomic_write_bytes


@dataclass(frozen=True)
class FrameResult:
    """Per-frame evaluation outcome. Distances are None for failed frames;
    mm values are the px values scaled by the detector pixel spacing."""

    sequence_id: str
    frame_id: int
    success: bool
    tip_px: float | None = None
    tip_mm: float | None = None
    gt2seg_px: float | None = None
    gt2seg_mm: float | None = None
    seg2gt_px: float | None = None
    seg2gt_mm: float | None = None

    def __post_init__(self):
        if self.success:
            for name in ("tip_px", "gt2seg_px", "seg2gt_px"):
                v = getattr(self, name)
                if v is None or v < 0:
                    raise ValueError(f"{name} must be a non-negative distance")

    def centerline_px(self) -> float | None:
        """Symmetric per-frame centerline error: mean of both directions."""
        if not self.success:
            return None
        return 0.5 * (self.gt2seg_px + self.seg2gt_px)


def _points(c) -> np.ndarray:
    pts = c.points if hasattr(c, "points") else np.asarray(c, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError("need a non-empty (n, 2) point array")
    return pts


def tip_distance(gt, seg) -> float:
    """Euclidean distance between the two tip points (index 0 of each)."""
    a, b = _points(gt), _points(seg)
    return float(np.linalg.norm(a[0] - b[0]))


def centerline_distance(a, b) -> float:
    """Mean over points of ``a`` of the distance to the closest point of
    ``b``. Directional: callers report both orderings. Inputs are expected
    to be resampled at 1 px arc spacing."""
    pa, pb = _points(a), _points(b)
    d, _ = cKDTree(pb).query(pa)
    return float(np.mean(d))


def dice_coefficient(a: BinaryMask, b: BinaryMask) -> float:
    """Overlap score 2|A∩B| / (|A| + |B|) in [0, 1]; 1 when both empty."""
    if a.data.shape != b.data.shape:
        raise ValueError("mask dimensions differ")
    na, nb = int(a.data.sum()), int(b.data.sum())
    if na + nb == 0:
        return 1.0
    overlap = int((a.data & b.data).sum())
    return 2.0 * overlap / (na + nb)


def tip_precision(results) -> tuple[dict, dict]:
    """Per-sequence population standard deviation of the tip error, over
    successful frames only, plus summary statistics across sequences.

    Sequences contributing fewer than two successful frames are excluded
    with a warning. Returns (per_sequence_std, summary).
    """
    by_seq: dict[str, list[float]] = {}
    for r in results:
        if r.success:
            by_seq.setdefault(r.sequence_id, []).append(r.tip_px)
    per_seq = {}
    for seq_id in sorted(by_seq):
        errs = by_seq[seq_id]
        if len(errs) < 2:
            warnings.warn(
                f"sequence {seq_id}: fewer than 2 usable frames, "
                "excluded from tip precision", stacklevel=2)
            continue
        per_seq[seq_id] = float(np.std(np.array(errs, dtype=np.float64)))
    if per_seq:
        vals = np.array(list(per_seq.values()), dtype=np.float64)
        summary = {
            "median": float(np.median(vals)),
            "mean": float(np.mean(vals)),
            "min": float(np.min(vals)),
            "max": float(np.max(vals)),
        }
    else:
        summary = {"median": None, "mean": None, "min": None, "max": None}
    return per_seq, summary


def evaluate_frame(sequence_id: str, frame_id: int, gt, seg,
                   spacing: PixelSpacing | None = None) -> FrameResult:
    """Build a FrameResult from a ground-truth and an extracted centerline;
    ``seg=None`` marks a failed frame."""
    if spacing is None:
        spacing = PixelSpacing()
    if seg is None:
        return FrameResult(sequence_id, frame_id, success=False)
    tip = tip_distance(gt, seg)
    g2s = centerline_distance(gt, seg)
    s2g = centerline_distance(seg, gt)
    return FrameResult(
        sequence_id, frame_id, success=True,
        tip_px=tip, tip_mm=spacing.to_mm(tip),
        gt2seg_px=g2s, gt2seg_mm=spacing.to_mm(g2s),
        seg2gt_px=s2g, seg2gt_mm=spacing.to_mm(s2g),
    )


def summarize(results, threshold_px: float = 3.0) -> dict:
    """Aggregate frame results: distance medians/means over successful
    frames, failure counts, per-sequence tip precision, and the percentage
    of all frames whose symmetric centerline error is within
    ``threshold_px`` (failed frames count as over the threshold)."""
    results = list(results)
    ok = [r for r in results if r.success]

    def stats(values):
        if not values:
            return {"median": None, "mean": None}
        arr = np.array(values, dtype=np.float64)
        return {"median": float(np.median(arr)), "mean": float(np.mean(arr))}

    per_seq, precision_summary = tip_precision(results)
    n_under = sum(1 for r in ok if r.centerline_px() <= threshold_px)
    return {
        "n_frames": len(results),
        "n_success": len(ok),
        "n_failed": len(results) - len(ok),
        "success_rate": len(ok) / len(results) if results else None,
        "tip_px": stats([r.tip_px for r in ok]),
        "tip_mm": stats([r.tip_mm for r in ok]),
        "gt2seg_px": stats([r.gt2seg_px for r in ok]),
        "seg2gt_px": stats([r.seg2gt_px for r in ok]),
        "centerline_px": stats([r.centerline_px() for r in ok]),
        "centerline_mm": stats([0.5 * (r.gt2seg_mm + r.seg2gt_mm) for r in ok]),
        "tip_precision_per_sequence": per_seq,
        "tip_precision": precision_summary,
        "threshold_px": float(threshold_px),
        "percent_under_threshold":
            100.0 * n_under / len(results) if results else None,
    }


_CSV_COLUMNS = ("sequence", "frame", "tip_px", "tip_mm", "gt2seg", "seg2gt", "success")


def write_report_csv(results, path) -> None:
    """One row per frame; failed frames leave the distance cells empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for r in results:
        if r.success:
            row = [r.sequence_id, r.frame_id,
                   f"{r.tip_px:.6f}", f"{r.tip_mm:.6f}",
                   f"{r.gt2seg_px:.6f}", f"{r.seg2gt_px:.6f}", 1]
        else:
            row = [r.sequence_id, r.frame_id, "", "", "", "", 0]
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def write_summary_json(summary: dict, path) -> None:
    atomic_write_bytes(path, json.dumps(summary, indent=2).encode("utf-8"))
