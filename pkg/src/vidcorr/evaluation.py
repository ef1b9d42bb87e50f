"""Segmentation and keypoint metrics plus report generation.

Masks are compared by region overlap (Jaccard) and by boundary agreement
(symmetric F-measure within a pixel radius); keypoints by the fraction
within a scale-relative threshold; semantic maps by class-averaged IoU.
All values lie in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def jaccard(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Region similarity |intersection| / |union|; 1 when both masks are empty."""
    _check_same_shape(pred_mask, gt_mask)
    pred = pred_mask.astype(bool)
    gt = gt_mask.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Mask cells with at least one 4-neighbor of opposite value (the frame
    border counts as background)."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def default_boundary_radius(shape: tuple[int, int]) -> int:
    """0.8% of the image diagonal, rounded up."""
    return int(np.ceil(0.008 * np.hypot(*shape)))


def boundary_f(pred_mask: np.ndarray, gt_mask: np.ndarray,
               radius: float | None = None) -> float:
    """Boundary F-measure: harmonic mean of boundary precision/recall within
    ``radius`` pixels.  Both boundaries empty -> 1; exactly one empty -> 0."""
    _check_same_shape(pred_mask, gt_mask)
    if radius is None:
        radius = default_boundary_radius(pred_mask.shape)
    if radius < 0:
        raise ValidationError("radius must be >= 0")
    pred_b = mask_boundary(pred_mask)
    gt_b = mask_boundary(gt_mask)
    if not pred_b.any() and not gt_b.any():
        return 1.0
    if not pred_b.any() or not gt_b.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gt_b)
    dist_to_pred = ndimage.distance_transform_edt(~pred_b)
    precision = float((dist_to_gt[pred_b] <= radius).mean())
    recall = float((dist_to_pred[gt_b] <= radius).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pck(pred_kp: np.ndarray, gt_kp: np.ndarray, alpha: float,
        reference_scale: float) -> float:
    """Fraction of keypoints within ``alpha * reference_scale`` pixels."""
    pred = np.asarray(pred_kp, dtype=np.float64)
    gt = np.asarray(gt_kp, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise DimensionError(f"keypoint shapes {pred.shape} vs {gt.shape}")
    if reference_scale <= 0:
        raise ValidationError("reference scale must be positive")
    errors = np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])
    return float((errors <= alpha * reference_scale).mean())


def keypoint_reference_scale(gt_kp: np.ndarray) -> float:
    """Largest side of the ground-truth keypoint bounding box (>= 1 px)."""
    gt = np.asarray(gt_kp, dtype=np.float64)
    spans = gt.max(axis=0) - gt.min(axis=0)
    return float(max(spans.max(), 1.0))


def miou(pred_semantic: np.ndarray, gt_semantic: np.ndarray,
         class_count: int) -> float:
    """Mean per-class IoU over classes present in either map."""
    _check_same_shape(pred_semantic, gt_semantic)
    pred = pred_semantic.astype(np.int64)
    gt = gt_semantic.astype(np.int64)
    if pred.min() < 0 or gt.min() < 0 or pred.max() >= class_count or gt.max() >= class_count:
        raise ValidationError(f"class ids must lie in [0, {class_count})")
    ious = []
    for c in range(class_count):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


# --------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    """Per-sequence metric rows plus their means."""

    task: str
    rows: list[dict] = field(default_factory=list)
    frame_count: int = 0

    def add_row(self, sequence: str, frames: int, **metrics: float):
        for v in metrics.values():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"metric value {v} outside [0, 1]")
        self.rows.append({"sequence": sequence, "frames": frames, **metrics})
        self.frame_count += frames

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {}
        keys = [k for k in self.rows[0] if k not in ("sequence", "frames")]
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}

    def to_text(self) -> str:
        lines = [f"task={self.task} sequences={len(self.rows)} frames={self.frame_count}"]
        for row in self.rows:
            metrics = " ".join(f"{k}={row[k]:.6f}" for k in row
                               if k not in ("sequence", "frames"))
            lines.append(f"sequence={row['sequence']} frames={row['frames']} {metrics}")
        means = " ".join(f"{k}={v:.6f}" for k, v in self.means().items())
        lines.append(f"mean {means}")
        return "\n".join(lines) + "\n"
