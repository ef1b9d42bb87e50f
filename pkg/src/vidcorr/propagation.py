"""Recurrent label propagation across a video.

Frame 0 carries ground-truth labels; every later frame is reconstructed
from up to ``context_frames`` preceding predictions plus frame 0.  Each
reference contributes one mutual-correlation affinity whose rows are pruned
to their ``neighbors`` largest entries and renormalized; the per-reference
transformations are averaged cellwise.  Class masks travel as soft one-hot
maps at feature resolution (majority-vote downsampled) and are emitted as
argmax masks upsampled back to pixels; keypoints travel as per-keypoint
Gaussian heatmaps decoded by their argmax cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .affinity import (Affinity, FeatureMap, LabelMap, compute_affinity,
                       compute_mutual_affinity, transform_labels)
from .errors import DimensionError, ValidationError

KEYPOINT_SIGMA_CELLS = 1.0


@dataclass
class PropagationConfig:
    """Inference settings: context length L, kept neighbors k, softmax scale."""

    context_frames: int = 7
    neighbors: int = 5
    temperature: float = 0.07
    label_kind: str = "mask"
    use_mutual: bool = True

    def __post_init__(self):
        if self.context_frames < 0:
            raise ValidationError("context_frames must be >= 0")
        if self.neighbors < 1:
            raise ValidationError("neighbors must be >= 1")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.label_kind not in ("mask", "keypoint"):
            raise ValidationError(f"unknown label kind {self.label_kind!r}")


def knn_filter_row(row: torch.Tensor, k: int) -> torch.Tensor:
    """Keep the k largest entries of a stochastic row (ties -> lower index),
    zero the rest, renormalize to sum 1.  k beyond the row length keeps all."""
    if row.dim() != 1:
        raise DimensionError("expected a 1-D row")
    if k >= row.numel():
        return row.clone()
    order = torch.argsort(-row, stable=True)
    kept = torch.zeros_like(row)
    kept[order[:k]] = row[order[:k]]
    return kept / kept.sum()


def knn_filter(a: Affinity, k: int) -> Affinity:
    """Row-wise k-NN pruning of a whole affinity."""
    vals = a.values
    if k >= vals.shape[1]:
        return a
    order = torch.argsort(-vals, dim=1, stable=True)
    mask = torch.zeros_like(vals)
    mask.scatter_(1, order[:, :k], 1.0)
    kept = vals * mask
    return Affinity(kept / kept.sum(dim=1, keepdim=True), kind=a.kind)


def _reference_indices(t: int, context: int) -> list[int]:
    """Frame 0 plus the preceding ``context`` frames (deduplicated)."""
    start = max(1, t - context)
    return [0] + list(range(start, t))


def propagate_sequence(feats: list[FeatureMap], first_labels: LabelMap,
                       cfg: PropagationConfig) -> list[LabelMap]:
    """Soft label maps for every frame; index 0 is the given ground truth."""
    if not feats:
        raise ValidationError("need at least one frame")
    if first_labels.cells != feats[0].cells:
        raise DimensionError(
            f"labels with {first_labels.cells} cells do not match the "
            f"{feats[0].cells}-cell feature grid"
        )
    preds: list[LabelMap] = [first_labels]
    with torch.no_grad():
        for t in range(1, len(feats)):
            votes = []
            for r in _reference_indices(t, cfg.context_frames):
                if cfg.use_mutual:
                    aff = compute_mutual_affinity(feats[t], feats[r], cfg.temperature)
                else:
                    aff = compute_affinity(feats[t], feats[r], cfg.temperature)
                aff = knn_filter(aff, cfg.neighbors)
                votes.append(transform_labels(aff, preds[r]).values)
            stacked = torch.stack(votes)
            preds.append(LabelMap(stacked.mean(dim=0), kind=first_labels.kind))
    return preds


# --------------------------------------------------------------------------
# mask plumbing

def downsample_mask_majority(mask: np.ndarray, stride: int) -> np.ndarray:
    """Per-cell majority vote over stride x stride blocks (ties -> lower id)."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise DimensionError(f"mask size {h}x{w} not divisible by stride {stride}")
    gh, gw = h // stride, w // stride
    blocks = mask.reshape(gh, stride, gw, stride).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(gh, gw, stride * stride)
    out = np.zeros((gh, gw), dtype=np.int64)
    for y in range(gh):
        for x in range(gw):
            out[y, x] = np.bincount(blocks[y, x]).argmax()
    return out


def upsample_mask_nearest(mask: np.ndarray, stride: int) -> np.ndarray:
    return np.kron(mask, np.ones((stride, stride), dtype=mask.dtype))


def mask_to_labelmap(mask_small: np.ndarray, class_ids: list[int]) -> LabelMap:
    """One-hot encode a feature-resolution class map over the given ids."""
    flat = mask_small.reshape(-1)
    values = torch.zeros(len(class_ids), flat.size, dtype=torch.float32)
    for c, cid in enumerate(class_ids):
        values[c] = torch.from_numpy((flat == cid).astype(np.float32))
    return LabelMap(values, kind="class")


def labelmap_to_mask(labels: LabelMap, class_ids: list[int],
                     grid_height: int, grid_width: int) -> np.ndarray:
    """Per-cell argmax back to class ids at feature resolution."""
    arg = labels.values.argmax(dim=0).cpu().numpy()
    ids = np.asarray(class_ids, dtype=np.int64)
    return ids[arg].reshape(grid_height, grid_width)


def propagate_masks(feats: list[FeatureMap], first_mask: np.ndarray, stride: int,
                    cfg: PropagationConfig) -> list[np.ndarray]:
    """Full pipeline for masks: downsample, propagate, emit pixel masks."""
    small = downsample_mask_majority(first_mask, stride)
    class_ids = sorted(int(c) for c in np.unique(small))
    labels = mask_to_labelmap(small, class_ids)
    preds = propagate_sequence(feats, labels, cfg)
    out = []
    for pred, fmap in zip(preds, feats):
        small_pred = labelmap_to_mask(pred, class_ids, fmap.height, fmap.width)
        out.append(upsample_mask_nearest(small_pred, stride))
    return out


# --------------------------------------------------------------------------
# keypoint plumbing

def keypoints_to_heatmaps(points: np.ndarray, grid_height: int, grid_width: int,
                          stride: int) -> LabelMap:
    """One Gaussian channel per keypoint, sigma of one cell, grid units."""
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError("keypoints must be (K, 3) rows of id/x/y")
    ys, xs = np.mgrid[0:grid_height, 0:grid_width]
    channels = []
    for _, px, py in points:
        cx = px / stride - 0.5
        cy = py / stride - 0.5
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        channels.append(np.exp(-d2 / (2 * KEYPOINT_SIGMA_CELLS ** 2)).reshape(-1))
    values = torch.from_numpy(np.stack(channels).astype(np.float32))
    return LabelMap(values, kind="heatmap")


def heatmaps_to_keypoints(labels: LabelMap, ids: np.ndarray, grid_height: int,
                          grid_width: int, stride: int) -> np.ndarray:
    """Per-channel argmax cell mapped back to its pixel center."""
    out = np.zeros((labels.channels, 3), dtype=np.float64)
    flat = labels.values.cpu().numpy()
    for c in range(labels.channels):
        j = int(flat[c].argmax())
        out[c] = (ids[c], (j % grid_width + 0.5) * stride,
                  (j // grid_width + 0.5) * stride)
    return out


def propagate_keypoints(feats: list[FeatureMap], points: np.ndarray, stride: int,
                        cfg: PropagationConfig) -> list[np.ndarray]:
    """Carry keypoints through the video; one (K, 3) array per frame."""
    gh, gw = feats[0].height, feats[0].width
    frame_w, frame_h = gw * stride, gh * stride
    if ((points[:, 1] < 0) | (points[:, 1] > frame_w)
            | (points[:, 2] < 0) | (points[:, 2] > frame_h)).any():
        raise ValidationError("keypoints must lie inside the frame")
    labels = keypoints_to_heatmaps(points, gh, gw, stride)
    preds = propagate_sequence(feats, labels, cfg)
    ids = points[:, 0]
    return [heatmaps_to_keypoints(p, ids, gh, gw, stride) for p in preds]
