"""Training objectives for affinity-based transformation.

Five components, all mean-reduced so their magnitudes are invariant to
batch and grid size, combined by an unweighted sum of whichever components
are switched on:

* reconstruction: L1 between the transformed and the true target patch,
* intra/inter consistency: L1 between the single-video and the
  batch-contrastive reconstructions,
* sparsity: mean entry of the negative sub-affinity blocks,
* cycle: squared deviation of the forward/backward affinity round trip
  from the identity,
* concentration: mean per-row coordinate spread of the affinity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .affinity import Affinity
from .errors import DimensionError, ValidationError


@dataclass
class LossSwitches:
    """Per-component enable flags (the ablation grid)."""

    intra: bool = True
    inter: bool = True
    sparse: bool = True
    cycle: bool = True
    concentration: bool = True


@dataclass
class LossReport:
    """Scalar loss components of one step; ``total`` sums the enabled ones."""

    self_loss: float = 0.0
    intra_inter_loss: float = 0.0
    sparse_loss: float = 0.0
    cycle_loss: float = 0.0
    concentration_loss: float = 0.0
    total: float = 0.0

    def __post_init__(self):
        import math

        parts = (self.self_loss, self.intra_inter_loss, self.sparse_loss,
                 self.cycle_loss, self.concentration_loss, self.total)
        if not all(math.isfinite(v) and v >= 0 for v in parts):
            raise ValidationError(f"loss components must be finite and >= 0: {parts}")

    def components(self) -> dict[str, float]:
        return {
            "self": self.self_loss,
            "intra_inter": self.intra_inter_loss,
            "sparse": self.sparse_loss,
            "cycle": self.cycle_loss,
            "concentration": self.concentration_loss,
        }


@dataclass
class CoordinateGrid:
    """Per-cell ``(x, y)`` coordinates of a row-major grid, in cell units."""

    height: int
    width: int
    values: Tensor

    @classmethod
    def make(cls, height: int, width: int, dtype: torch.dtype = torch.float32
             ) -> "CoordinateGrid":
        ys, xs = torch.meshgrid(
            torch.arange(height, dtype=dtype),
            torch.arange(width, dtype=dtype),
            indexing="ij",
        )
        coords = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)
        return cls(height, width, coords)

    @property
    def cells(self) -> int:
        return self.height * self.width


def _l1_mean(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_self(transformed: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference between the reconstruction and the target."""
    return _l1_mean(transformed, target)


def loss_intra_inter(intra_transformed: Tensor, inter_transformed: Tensor) -> Tensor:
    """Mean absolute difference between the two reconstructions."""
    return _l1_mean(intra_transformed, inter_transformed)


def loss_sparse(negative: Tensor) -> Tensor:
    """Mean entry of the negative sub-affinity (0 for an empty block)."""
    if negative.numel() == 0:
        return torch.zeros((), dtype=negative.dtype if negative.dim() else torch.float32)
    if bool((negative.detach() < 0).any()):
        raise ValidationError("negative sub-affinity entries must be nonnegative")
    return negative.mean()


def loss_cycle(a_fwd: Affinity, a_bwd: Affinity) -> Tensor:
    """Mean squared deviation of the round trip from the identity.

    ``a_fwd`` maps reference cells to target cells and ``a_bwd`` the reverse;
    a label starting on the target grid travels through ``a_bwd`` then back
    through ``a_fwd``, so the round-trip operator is their product on the
    target grid.
    """
    if a_fwd.cols != a_bwd.rows or a_fwd.rows != a_bwd.cols:
        raise DimensionError(
            f"incompatible affinity shapes {a_fwd.values.shape} and {a_bwd.values.shape}"
        )
    product = a_fwd.values @ a_bwd.values
    eye = torch.eye(a_fwd.rows, dtype=product.dtype, device=product.device)
    return ((product - eye) ** 2).mean()


def loss_concentration(a: Affinity, ref_coords: CoordinateGrid) -> Tensor:
    """Mean per-row spatial variance of the affinity, in squared cell units.

    Row ``i`` contributes the affinity-weighted squared distance of reference
    coordinates from their affinity-weighted mean.
    """
    if ref_coords.cells != a.cols:
        raise DimensionError(
            f"coordinate grid with {ref_coords.cells} cells does not match "
            f"affinity with {a.cols} columns"
        )
    coords = ref_coords.values.to(a.values.dtype)
    # Shift to the grid mean before squaring to limit cancellation error.
    coords = coords - coords.mean(dim=0, keepdim=True)
    centers = a.values @ coords
    second_moment = a.values @ (coords ** 2).sum(dim=1)
    spread = second_moment - (centers ** 2).sum(dim=1)
    return spread.mean().clamp_min(0)


def loss_total(
    switches: LossSwitches,
    self_loss: Tensor | float | None = None,
    intra_inter_loss: Tensor | float | None = None,
    sparse_loss: Tensor | float | None = None,
    cycle_loss: Tensor | float | None = None,
    concentration_loss: Tensor | float | None = None,
) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the enabled components.

    Disabled components are reported as 0 and excluded from the total;
    enabled components must be supplied.  Returns the differentiable total
    plus the detached scalar report.
    """
    named = [
        ("intra", self_loss),
        ("inter", intra_inter_loss),
        ("sparse", sparse_loss),
        ("cycle", cycle_loss),
        ("concentration", concentration_loss),
    ]
    values = []
    for flag_name, value in named:
        enabled = getattr(switches, flag_name)
        if enabled and value is None:
            raise ValidationError(f"component {flag_name!r} is enabled but missing")
        values.append(torch.as_tensor(value if enabled and value is not None else 0.0))
    total = values[0] * 0.0
    for flag_name, value in zip([n for n, _ in named], values):
        if getattr(switches, flag_name):
            total = total + value
    scalars = [float(v.detach()) for v in values]
    report = LossReport(
        self_loss=scalars[0],
        intra_inter_loss=scalars[1],
        sparse_loss=scalars[2],
        cycle_loss=scalars[3],
        concentration_loss=scalars[4],
        total=float(total.detach()),
    )
    return total, report
