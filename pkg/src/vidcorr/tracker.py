"""Patch-level tracking: pair generation for contrastive training.

A patch is randomly cropped from a reference frame, then located in the
target frame through a patch-to-frame affinity: each patch cell votes for
its best-matching frame cell, the most similar fifth of the votes are kept,
and their similarity-weighted mean (each vote shifted by its own cell's
offset from the patch center) gives the new center.  The spread ratio of
matched coordinates gives a scale estimate.  Both crops are returned at
equal pixel size together with a match confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .affinity import FeatureMap
from .errors import DimensionError, TrackingFailure, ValidationError

MIN_KEPT_MATCHES = 4
KEEP_FRACTION = 0.2
STEP_SCALE_RANGE = (0.7, 1.4)
TOTAL_SCALE_RANGE = (0.5, 2.0)


@dataclass
class PatchBox:
    """Axis-aligned crop region in frame pixels."""

    center_x: float
    center_y: float
    width: float
    height: float
    scale: float = 1.0

    def bounds(self) -> tuple[int, int, int, int]:
        """Integer (left, top, right, bottom), right/bottom exclusive."""
        left = int(round(self.center_x - self.width / 2))
        top = int(round(self.center_y - self.height / 2))
        return left, top, left + int(round(self.width)), top + int(round(self.height))

    def clamped(self, frame_height: int, frame_width: int) -> "PatchBox":
        """Shift (and if needed shrink) the box so it lies inside the frame."""
        w = min(self.width, frame_width)
        h = min(self.height, frame_height)
        cx = min(max(self.center_x, w / 2), frame_width - w / 2)
        cy = min(max(self.center_y, h / 2), frame_height - h / 2)
        scale = min(max(self.scale, TOTAL_SCALE_RANGE[0]), TOTAL_SCALE_RANGE[1])
        return PatchBox(cx, cy, w, h, scale)


@dataclass
class TrackedPair:
    """Matched reference/target crops of equal pixel size."""

    reference_patch: Tensor
    target_patch: Tensor
    reference_box: PatchBox
    target_box: PatchBox
    match_confidence: float

    def __post_init__(self):
        if self.reference_patch.shape != self.target_patch.shape:
            raise DimensionError("reference and target crops must share pixel size")
        if not 0.0 <= self.match_confidence <= 1.0:
            raise ValidationError("match confidence must lie in [0, 1]")


def random_crop(frame: Tensor, patch_size: int, gen: torch.Generator) -> PatchBox:
    """Uniformly random patch-sized box fully inside the frame."""
    if frame.dim() != 3:
        raise DimensionError(f"expected a (3, H, W) frame, got {tuple(frame.shape)}")
    _, h, w = frame.shape
    if h < patch_size or w < patch_size:
        raise ValidationError(f"frame {h}x{w} is smaller than patch size {patch_size}")
    top = int(torch.randint(0, h - patch_size + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - patch_size + 1, (1,), generator=gen))
    return PatchBox(left + patch_size / 2, top + patch_size / 2,
                    float(patch_size), float(patch_size), scale=1.0)


def crop_patch(frame: Tensor, box: PatchBox, out_size: int) -> Tensor:
    """Crop a clamped box and bilinearly resize to ``out_size`` square."""
    _, h, w = frame.shape
    left, top, right, bottom = box.clamped(h, w).bounds()
    left, top = max(0, left), max(0, top)
    right, bottom = min(w, right), min(h, bottom)
    crop = frame[:, top:bottom, left:right]
    if crop.shape[1] != out_size or crop.shape[2] != out_size:
        crop = F.interpolate(crop.unsqueeze(0), size=(out_size, out_size),
                             mode="bilinear", align_corners=False).squeeze(0)
    return crop


def _cell_centers(height: int, width: int, stride: int) -> Tensor:
    ys, xs = torch.meshgrid(torch.arange(height, dtype=torch.float32),
                            torch.arange(width, dtype=torch.float32), indexing="ij")
    return torch.stack([(xs.reshape(-1) + 0.5) * stride,
                        (ys.reshape(-1) + 0.5) * stride], dim=1)


def estimate_scale(patch_coords: Tensor, frame_coords: Tensor) -> float:
    """Spread ratio of matched frame coordinates to patch coordinates.

    Uses the x/y-averaged population standard deviation, clamped to the
    per-step range; zero patch spread falls back to 1.
    """
    if patch_coords.shape[0] < MIN_KEPT_MATCHES:
        raise ValidationError(f"need at least {MIN_KEPT_MATCHES} matches")
    patch_spread = float(patch_coords.std(dim=0, correction=0).mean())
    frame_spread = float(frame_coords.std(dim=0, correction=0).mean())
    if patch_spread <= 1e-9:
        return 1.0
    return min(max(frame_spread / patch_spread, STEP_SCALE_RANGE[0]), STEP_SCALE_RANGE[1])


def track_patch(ref_patch_feat: FeatureMap, target_frame_feat: FeatureMap,
                stride: int) -> tuple[PatchBox, float]:
    """Locate the reference patch inside the target frame.

    Returns the tracked box (clamped inside the frame) and the match
    confidence, the mean min-max-normalized similarity of the kept matches.
    Raises :class:`TrackingFailure` when fewer than four matches exist;
    callers fall back to the reference box location.
    """
    if ref_patch_feat.channels != target_frame_feat.channels:
        raise DimensionError("patch and frame features must share channel count")
    if not (target_frame_feat.height > ref_patch_feat.height
            and target_frame_feat.width > ref_patch_feat.width):
        raise ValidationError("target frame grid must be strictly larger than the patch grid")

    sim = ref_patch_feat.values.T @ target_frame_feat.values
    best_sim, best_idx = sim.max(dim=1)

    n_patch = ref_patch_feat.cells
    if n_patch < MIN_KEPT_MATCHES:
        raise TrackingFailure(f"patch grid has only {n_patch} cells")
    keep = max(MIN_KEPT_MATCHES, math.ceil(KEEP_FRACTION * n_patch))

    # Stable descending sort so ties keep the lower cell index.
    order = torch.argsort(-best_sim, stable=True)[:keep]

    smin, smax = float(best_sim.min()), float(best_sim.max())
    if smax > smin:
        normalized = (best_sim - smin) / (smax - smin)
    else:
        normalized = torch.zeros_like(best_sim)
    weights = normalized[order]
    if float(weights.sum()) <= 0:
        weights = torch.ones_like(weights)
    confidence = float(normalized[order].mean())

    patch_centers = _cell_centers(ref_patch_feat.height, ref_patch_feat.width, stride)
    frame_centers = _cell_centers(target_frame_feat.height, target_frame_feat.width, stride)
    patch_px = (ref_patch_feat.width * stride, ref_patch_feat.height * stride)

    kept_patch = patch_centers[order]
    kept_frame = frame_centers[best_idx[order]]
    # Each match votes for a center: its frame location minus its own offset
    # from the patch center.
    offsets = kept_patch - torch.tensor([patch_px[0] / 2, patch_px[1] / 2])
    votes = kept_frame - offsets
    center = (votes * weights.unsqueeze(1)).sum(dim=0) / weights.sum()

    scale = estimate_scale(kept_patch, kept_frame)
    box = PatchBox(float(center[0]), float(center[1]),
                   patch_px[0] * scale, patch_px[1] * scale, scale=scale)
    frame_h = target_frame_feat.height * stride
    frame_w = target_frame_feat.width * stride
    return box.clamped(frame_h, frame_w), confidence
