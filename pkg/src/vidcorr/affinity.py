"""Row-stochastic affinity matrices between feature grids and the label
transformations they drive.

A feature grid is stored flattened: a ``C x N`` matrix whose column ``j``
holds the embedding of spatial cell ``j`` in row-major order.  An affinity
between a target grid (N1 cells) and a reference grid (N2 cells) is the
softmax over reference cells of the scaled dot products, so every row is a
probability distribution over reference cells.  Multiplying any per-cell
quantity of the reference grid (colors, one-hot masks, heatmaps) by the
affinity produces its reconstruction on the target grid.

Three constructions are provided:

* single-pair affinity (``compute_affinity``),
* batch-contrastive affinity over the concatenated references of several
  videos (``compute_inter_affinity``), split into the positive block and
  the negative blocks,
* mutual-correlation affinity for inference (``compute_mutual_affinity``),
  which down-weights similarities that are not close to being both a row
  and a column maximum.

All functions are pure, dtype-preserving, and keep autograd history of the
input tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateRowError, DimensionError, ValidationError

ROW_SUM_ATOL = 1e-5
UNIT_NORM_ATOL = 1e-5


@dataclass
class FeatureMap:
    """Flattened feature grid: ``values[c, j]`` is channel ``c`` of cell ``j``.

    Cells are indexed row-major, so cell ``j`` sits at grid position
    ``(x, y) = (j % width, j // width)``.
    """

    channels: int
    height: int
    width: int
    values: Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.channels <= 0 or self.height <= 0 or self.width <= 0:
            raise ValidationError("feature grid dimensions must be positive")
        n = self.height * self.width
        if tuple(self.values.shape) != (self.channels, n):
            raise DimensionError(
                f"expected values of shape ({self.channels}, {n}), "
                f"got {tuple(self.values.shape)}"
            )
        if not bool(torch.isfinite(self.values).all()):
            raise ValidationError("feature values must be finite")
        if self.normalized:
            norms = torch.linalg.vector_norm(self.values.detach(), dim=0)
            if not bool(((norms - 1.0).abs() <= UNIT_NORM_ATOL).all()):
                raise ValidationError("normalized flag set but columns are not unit-L2")

    @property
    def cells(self) -> int:
        return self.height * self.width

    @classmethod
    def from_grid(cls, grid: Tensor, normalized: bool = False) -> "FeatureMap":
        """Build from a ``(C, h, w)`` tensor by row-major flattening."""
        if grid.dim() != 3:
            raise DimensionError(f"expected a (C, h, w) grid, got shape {tuple(grid.shape)}")
        c, h, w = grid.shape
        return cls(c, h, w, grid.reshape(c, h * w), normalized=normalized)

    def normalize(self) -> "FeatureMap":
        """Return a copy with unit-L2 columns.  Zero columns are rejected."""
        norms = torch.linalg.vector_norm(self.values, dim=0, keepdim=True)
        if bool((norms.detach() == 0).any()):
            raise ValidationError("cannot L2-normalize a zero feature column")
        return FeatureMap(self.channels, self.height, self.width,
                          self.values / norms, normalized=True)


@dataclass
class BatchFeatures:
    """Reference features of ``n`` videos, concatenated along the cell axis.

    ``offsets[i]:offsets[i+1]`` is video ``i``'s column block in the
    concatenation; ``positive_index`` marks the block that belongs to the
    same video as the current target.
    """

    maps: list[FeatureMap]
    positive_index: int
    offsets: list[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not self.maps:
            raise ValidationError("batch must contain at least one feature map")
        channels = self.maps[0].channels
        if any(m.channels != channels for m in self.maps):
            raise DimensionError("all feature maps in a batch must share channel count")
        expected = [0]
        for m in self.maps:
            expected.append(expected[-1] + m.cells)
        if self.offsets is None:
            self.offsets = expected
        elif list(self.offsets) != expected:
            raise ValidationError(f"offsets {self.offsets} do not match map sizes {expected}")
        if not 0 <= self.positive_index < len(self.maps):
            raise ValidationError(
                f"positive_index {self.positive_index} out of range [0, {len(self.maps)})"
            )

    @property
    def size(self) -> int:
        return len(self.maps)

    @property
    def channels(self) -> int:
        return self.maps[0].channels

    @property
    def total_cells(self) -> int:
        return self.offsets[-1]

    def positive_block(self) -> tuple[int, int]:
        """Column range of the positive video inside the concatenation."""
        p = self.positive_index
        return self.offsets[p], self.offsets[p + 1]

    def negative_cells(self) -> int:
        """Number of concatenated cells belonging to other videos."""
        lo, hi = self.positive_block()
        return self.total_cells - (hi - lo)

    def concatenated(self) -> Tensor:
        return torch.cat([m.values for m in self.maps], dim=1)


@dataclass
class Affinity:
    """Row-stochastic ``N1 x N2`` matrix of match probabilities."""

    values: Tensor
    kind: str = "intra"

    def __post_init__(self):
        if self.kind not in ("intra", "inter", "mutual"):
            raise ValidationError(f"unknown affinity kind {self.kind!r}")
        if self.values.dim() != 2:
            raise DimensionError("affinity must be a 2-D matrix")
        vals = self.values.detach()
        if not bool(torch.isfinite(vals).all()):
            raise ValidationError("affinity entries must be finite")
        if bool((vals < 0).any()):
            raise ValidationError("affinity entries must be nonnegative")
        row_sums = vals.sum(dim=1)
        if not bool(((row_sums - 1.0).abs() <= ROW_SUM_ATOL).all()):
            raise ValidationError("affinity rows must sum to 1")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass
class SubAffinityPair:
    """Column split of a batch-contrastive affinity at the positive block."""

    positive: Tensor
    negative: Tensor

    def __post_init__(self):
        if self.positive.dim() != 2 or self.negative.dim() != 2:
            raise DimensionError("sub-affinities must be 2-D matrices")
        if self.negative.shape[0] != self.positive.shape[0]:
            raise DimensionError("positive and negative blocks must share row count")
        total = self.positive.detach().sum(dim=1)
        if self.negative.shape[1] > 0:
            total = total + self.negative.detach().sum(dim=1)
        if not bool(((total - 1.0).abs() <= ROW_SUM_ATOL).all()):
            raise ValidationError("positive and negative row masses must sum to 1")


@dataclass
class LabelMap:
    """Any per-cell quantity transformable by an affinity.

    ``values[k, j]`` is channel ``k`` at cell ``j``; for ``kind="class"``
    channels are per-class soft assignments whose per-cell sum is <= 1.
    """

    values: Tensor
    kind: str = "generic"

    def __post_init__(self):
        if self.values.dim() != 2:
            raise DimensionError("label map values must be a (channels, cells) matrix")
        vals = self.values.detach()
        if not bool(torch.isfinite(vals).all()):
            raise ValidationError("label values must be finite")
        if self.kind == "class":
            if bool((vals < -1e-6).any()) or bool((vals > 1 + 1e-5).any()):
                raise ValidationError("class label entries must lie in [0, 1]")
            if bool((vals.sum(dim=0) > 1 + 1e-5).any()):
                raise ValidationError("per-cell class mass must not exceed 1")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def cells(self) -> int:
        return self.values.shape[1]


def _check_pair(f_t: FeatureMap, f_r: FeatureMap):
    if f_t.channels != f_r.channels:
        raise DimensionError(
            f"channel mismatch: target has {f_t.channels}, reference has {f_r.channels}"
        )


def _check_temperature(temperature: float):
    if not (temperature > 0 and math.isfinite(temperature)):
        raise ValidationError(f"temperature must be a positive real, got {temperature}")


def _row_softmax(logits: Tensor) -> Tensor:
    # torch.softmax subtracts the per-row max internally (overflow-safe).
    return torch.softmax(logits, dim=1)


def compute_affinity(f_t: FeatureMap, f_r: FeatureMap, temperature: float = 1.0) -> Affinity:
    """Softmax-over-reference affinity between two feature grids.

    Entry ``(i, j)`` is ``exp(f_t(i).f_r(j) / temperature)`` normalized over
    all reference cells ``j``.
    """
    _check_pair(f_t, f_r)
    _check_temperature(temperature)
    logits = (f_t.values.T @ f_r.values) / temperature
    return Affinity(_row_softmax(logits), kind="intra")


def compute_inter_affinity(
    f_t: FeatureMap, batch: BatchFeatures, temperature: float = 1.0
) -> tuple[Affinity, SubAffinityPair]:
    """One softmax over the concatenated reference cells of a whole batch.

    Returns the full batch-level affinity plus its split into the positive
    block (the video matching the target) and the negative blocks (all other
    videos, in batch order with the positive block removed).
    """
    if f_t.channels != batch.channels:
        raise DimensionError(
            f"channel mismatch: target has {f_t.channels}, batch has {batch.channels}"
        )
    _check_temperature(temperature)
    logits = (f_t.values.T @ batch.concatenated()) / temperature
    full = _row_softmax(logits)
    lo, hi = batch.positive_block()
    positive = full[:, lo:hi]
    negative = torch.cat([full[:, :lo], full[:, hi:]], dim=1)
    return Affinity(full, kind="inter"), SubAffinityPair(positive, negative)


def renormalize_positive(sub: SubAffinityPair) -> Affinity:
    """Rescale the positive block to row-stochastic form.

    Because the batch softmax and the single-pair softmax share numerators,
    the result equals the single-pair affinity of the positive video exactly.
    """
    row_sums = sub.positive.sum(dim=1, keepdim=True)
    if bool((row_sums.detach() <= 0).any()):
        raise DegenerateRowError("a positive sub-affinity row has zero mass")
    return Affinity(sub.positive / row_sums, kind="intra")


def mutual_weights(f_t: FeatureMap, f_r: FeatureMap) -> Tensor:
    """Two-sided argmax-ratio weights in ``[0, 1]``.

    With ``s`` the similarity matrix clamped below at 0, the weight is
    ``(s / column max) * (s / row max)``; it equals 1 exactly where an entry
    is both its row's and its column's positive maximum, and 0 wherever the
    similarity is nonpositive.
    """
    _check_pair(f_t, f_r)
    if not (f_t.normalized and f_r.normalized):
        raise ValidationError("mutual weights require L2-normalized feature maps")
    sim = (f_t.values.T @ f_r.values).clamp_min(0)
    col_max = sim.max(dim=0, keepdim=True).values
    row_max = sim.max(dim=1, keepdim=True).values
    # An all-zero row/column yields factor 0 (no match), never a div error.
    w = (sim / col_max.clamp_min(torch.finfo(sim.dtype).tiny)) * (
        sim / row_max.clamp_min(torch.finfo(sim.dtype).tiny)
    )
    return w


def compute_mutual_affinity(
    f_t: FeatureMap,
    f_r: FeatureMap,
    temperature: float = 0.07,
    weights: Tensor | None = None,
) -> Affinity:
    """Affinity with similarities modulated by the mutual-correlation weight.

    ``weights`` overrides the computed weight matrix (all-ones recovers the
    plain affinity exactly).
    """
    _check_pair(f_t, f_r)
    _check_temperature(temperature)
    if weights is None:
        weights = mutual_weights(f_t, f_r)
    elif tuple(weights.shape) != (f_t.cells, f_r.cells):
        raise DimensionError(
            f"weights shape {tuple(weights.shape)} does not match "
            f"({f_t.cells}, {f_r.cells})"
        )
    sim = f_t.values.T @ f_r.values
    return Affinity(_row_softmax(weights * sim / temperature), kind="mutual")


def apply_affinity(a: Affinity, values: Tensor) -> Tensor:
    """Transform a raw ``(channels, cells)`` matrix: each output cell is the
    affinity-weighted convex combination of reference cells."""
    if values.dim() != 2 or values.shape[1] != a.cols:
        raise DimensionError(
            f"label matrix with {tuple(values.shape)} cells does not match "
            f"affinity with {a.cols} reference cells"
        )
    return values @ a.values.T


def transform_labels(a: Affinity, labels: LabelMap) -> LabelMap:
    """Carry a reference LabelMap to the target grid through the affinity."""
    return LabelMap(apply_affinity(a, labels.values), kind=labels.kind)


def affinity_to_image(a: Affinity) -> np.ndarray:
    """Debug heatmap: rows max-normalized and quantized to 8-bit grayscale."""
    vals = a.values.detach().to(torch.float32)
    row_max = vals.max(dim=1, keepdim=True).values.clamp_min(torch.finfo(torch.float32).tiny)
    img = (vals / row_max * 255.0).round().clamp(0, 255).to(torch.uint8)
    return img.cpu().numpy()
