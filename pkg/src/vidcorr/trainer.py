"""Offline training loop: batch assembly, patch tracking, both affinity
transformations, loss computation, optimization, and checkpointing.

Each step samples ``n`` distinct videos, builds a tracked patch pair per
video, and evaluates the objectives in both temporal directions: the target
patch is reconstructed from the reference patch and vice versa.  The
batch-contrastive affinity treats the other ``n - 1`` videos' features on
the same side of the pair as negatives, so one positive embedding contrasts
with ``(n - 1) * (N_ref + N_target)`` negatives per step.  During the
warm-up epochs the inter-video consistency and sparsity terms are disabled.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .affinity import BatchFeatures, FeatureMap
from .backbone import Backbone, BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import make_codec
from .data import DatasetIndex, index_dataset, load_frame
from .errors import (ConfigError, DimensionError, TrackingFailure, TrainAbort,
                     ValidationError)
from .losses import (CoordinateGrid, LossReport, LossSwitches, loss_intra_inter,
                     loss_self, loss_total)
from .tracker import PatchBox, TrackedPair, crop_patch, random_crop, track_patch

TEMPORAL_WINDOW = 5  # target frame drawn from [1, 5] frames after the reference


@dataclass
class TrainConfig:
    """Full hyperparameter record of one training run."""

    dataset: str = ""
    out_dir: str = "runs/default"
    batch_size: int = 4
    patch_size: int = 64
    learning_rate: float = 1e-4
    lr_halving_period: int = 200
    warmup_epochs: int = 125
    total_epochs: int = 500
    temperature: float = 1.0
    loss_intra: bool = True
    loss_inter: bool = True
    loss_sparse: bool = True
    loss_cycle: bool = True
    loss_concentration: bool = True
    seed: int = 0
    codec: str = "color"
    codec_ckpt: str = ""
    snapshot_every: int = 100
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.warmup_epochs > self.total_epochs:
            raise ValidationError("warmup_epochs must not exceed total_epochs")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValidationError("learning rate and temperature must be positive")
        if self.lr_halving_period < 1 or self.snapshot_every < 1:
            raise ValidationError("schedule periods must be positive")
        if self.patch_size % self.backbone.stride:
            raise ValidationError("patch_size must be divisible by the backbone stride")

    def switches(self) -> LossSwitches:
        return LossSwitches(intra=self.loss_intra, inter=self.loss_inter,
                            sparse=self.loss_sparse, cycle=self.loss_cycle,
                            concentration=self.loss_concentration)


@dataclass
class TrainState:
    backbone: Backbone
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int = 0
    global_step: int = 0
    lr: float = 0.0
    running: dict[str, float] = field(default_factory=dict)


def lr_at_epoch(base_lr: float, epoch: int, halving_period: int) -> float:
    """Step schedule: the base rate halved once per full period elapsed."""
    return base_lr * 0.5 ** (epoch // halving_period)


# --------------------------------------------------------------------------
# batch assembly

def sample_batch_videos(index: DatasetIndex, n: int, gen: torch.Generator) -> list[int]:
    if len(index.videos) < n:
        raise ConfigError(f"dataset has {len(index.videos)} videos, need {n}")
    perm = torch.randperm(len(index.videos), generator=gen)
    return [int(v) for v in perm[:n]]


def build_pair(frames: list[Path], patch_size: int, backbone: Backbone,
               gen: torch.Generator) -> TrackedPair:
    """Crop a reference patch and locate it in a nearby target frame."""
    n_frames = len(frames)
    ref_idx = int(torch.randint(0, n_frames - 1, (1,), generator=gen))
    max_ahead = min(TEMPORAL_WINDOW, n_frames - 1 - ref_idx)
    target_idx = ref_idx + 1 + int(torch.randint(0, max_ahead, (1,), generator=gen))
    ref_frame = load_frame(frames[ref_idx])
    target_frame = load_frame(frames[target_idx])

    ref_box = random_crop(ref_frame, patch_size, gen)
    ref_patch = crop_patch(ref_frame, ref_box, patch_size)

    stride = backbone.stride
    patch_grid = patch_size // stride
    frame_grid = (target_frame.shape[1] // stride, target_frame.shape[2] // stride)
    target_box, confidence = PatchBox(ref_box.center_x, ref_box.center_y,
                                      ref_box.width, ref_box.height), 0.0
    if (frame_grid[0] > patch_grid and frame_grid[1] > patch_grid
            and target_frame.shape[1] % stride == 0
            and target_frame.shape[2] % stride == 0):
        with torch.no_grad():
            patch_feat = backbone.features(ref_patch)
            frame_feat = backbone.features(target_frame)
        try:
            target_box, confidence = track_patch(patch_feat, frame_feat, stride)
        except TrackingFailure:
            pass  # fall back to the reference location
    target_patch = crop_patch(target_frame, target_box, patch_size)
    return TrackedPair(ref_patch, target_patch, ref_box, target_box, confidence)


def build_batch(index: DatasetIndex, n: int, patch_size: int, backbone: Backbone,
                gen: torch.Generator) -> list[TrackedPair]:
    """Sample ``n`` distinct videos and build one tracked pair from each."""
    ids = sample_batch_videos(index, n, gen)
    return [build_pair(index.videos[v].frames, patch_size, backbone, gen) for v in ids]


# --------------------------------------------------------------------------
# loss composition

def contrastive_step_losses(
    feats_t: list[FeatureMap],
    feats_r: list[FeatureMap],
    images_t: list[Tensor],
    images_r: list[Tensor],
    codec,
    temperature: float,
    switches: LossSwitches,
) -> tuple[Tensor, LossReport]:
    """Batch-averaged objective from per-video features and patches.

    Vectorized over the batch: the single-pair affinities become one batched
    matmul, and the batch-contrastive affinities of all videos are the row
    blocks of one softmax over the full target-cells x reference-cells
    concatenation.  Equivalent (up to float reduction order) to evaluating
    the per-pair operations video by video; exposed separately from
    :func:`train_step` so gradient checks can drive it with raw features.
    """
    n = len(feats_t)
    if not (len(feats_r) == len(images_t) == len(images_r) == n and n >= 1):
        raise ValidationError("per-video inputs must have equal nonzero length")
    gh, gw = feats_r[0].height, feats_r[0].width
    if any(f.height != gh or f.width != gw for f in feats_t + feats_r):
        raise DimensionError("all patches in a batch must share the feature grid size")
    cells = gh * gw

    stack_t = torch.stack([f.values for f in feats_t])  # (n, C, N)
    stack_r = torch.stack([f.values for f in feats_r])
    imgs_t = torch.stack(list(images_t))
    imgs_r = torch.stack(list(images_r))
    emb_t = codec.encode_batch(imgs_t).flatten(2)  # (n, Ce, N), constant wrt features
    emb_r = codec.encode_batch(imgs_r).flatten(2)
    if emb_t.shape[2] != cells:
        raise DimensionError("codec grid does not match the feature grid")

    logits = torch.bmm(stack_t.transpose(1, 2), stack_r) / temperature  # (n, N, N)
    a_fwd = torch.softmax(logits, dim=2)
    a_bwd = torch.softmax(logits.transpose(1, 2), dim=2)

    def reconstruct(affinities: Tensor, embeddings: Tensor) -> Tensor:
        mixed = torch.bmm(affinities, embeddings.transpose(1, 2)).transpose(1, 2)
        return codec.decode_batch(mixed.reshape(n, -1, gh, gw))

    self_term = None
    recon_t = recon_r = None
    if switches.intra or switches.inter:
        recon_t = reconstruct(a_fwd, emb_r)
        recon_r = reconstruct(a_bwd, emb_t)
    if switches.intra:
        self_term = (loss_self(recon_t, imgs_t) + loss_self(recon_r, imgs_r)) / 2

    inter_term = sparse_term = None
    if (switches.inter or switches.sparse) and n > 1:
        channels = stack_t.shape[1]
        cat_t = stack_t.permute(1, 0, 2).reshape(channels, n * cells)
        cat_r = stack_r.permute(1, 0, 2).reshape(channels, n * cells)
        big_fwd = torch.softmax(cat_t.T @ cat_r / temperature, dim=1)
        big_bwd = torch.softmax(cat_r.T @ cat_t / temperature, dim=1)
        if switches.inter:
            emb_ch = emb_r.shape[1]
            ecat_r = emb_r.permute(1, 0, 2).reshape(emb_ch, n * cells)
            ecat_t = emb_t.permute(1, 0, 2).reshape(emb_ch, n * cells)
            inter_recon_t = codec.decode_batch(
                (big_fwd @ ecat_r.T).reshape(n, cells, emb_ch)
                .transpose(1, 2).reshape(n, emb_ch, gh, gw))
            inter_recon_r = codec.decode_batch(
                (big_bwd @ ecat_t.T).reshape(n, cells, emb_ch)
                .transpose(1, 2).reshape(n, emb_ch, gh, gw))
            inter_term = (loss_intra_inter(recon_t, inter_recon_t)
                          + loss_intra_inter(recon_r, inter_recon_r)) / 2
        if switches.sparse:
            idx = torch.arange(n)
            # Row sums are 1, so the negative mass of each video's row block
            # is its cell count minus the positive-block mass.
            pos_fwd = big_fwd.reshape(n, cells, n, cells)[idx, :, idx, :].sum((1, 2))
            pos_bwd = big_bwd.reshape(n, cells, n, cells)[idx, :, idx, :].sum((1, 2))
            neg_entries = cells * (n - 1) * cells
            sparse_term = (((cells - pos_fwd) + (cells - pos_bwd)) / 2
                           / neg_entries).clamp_min(0).mean()
    elif switches.inter or switches.sparse:
        # Single-video batch: the contrastive affinity coincides with the
        # single-pair affinity and the negative block is empty.
        zero = logits.sum() * 0.0
        inter_term = zero if switches.inter else None
        sparse_term = zero if switches.sparse else None

    cycle_term = None
    if switches.cycle:
        eye = torch.eye(cells, dtype=logits.dtype).expand(n, cells, cells)
        cycle_term = ((torch.bmm(a_fwd, a_bwd) - eye) ** 2).mean()

    conc_term = None
    if switches.concentration:
        grid = CoordinateGrid.make(gh, gw, dtype=logits.dtype)
        conc_term = (_batched_concentration(a_fwd, grid.values)
                     + _batched_concentration(a_bwd, grid.values)) / 2

    return loss_total(
        switches,
        self_loss=self_term,
        intra_inter_loss=inter_term,
        sparse_loss=sparse_term,
        cycle_loss=cycle_term,
        concentration_loss=conc_term,
    )


def _batched_concentration(affinities: Tensor, coords: Tensor) -> Tensor:
    """Mean per-row coordinate spread over a (n, N, N) affinity stack."""
    centered = coords - coords.mean(dim=0, keepdim=True)
    centers = affinities @ centered
    second = affinities @ (centered ** 2).sum(dim=1)
    spread = second - (centers ** 2).sum(dim=2)
    return spread.mean().clamp_min(0)


def negative_embedding_count(batch_fwd: BatchFeatures, batch_bwd: BatchFeatures) -> int:
    """Negatives one positive embedding contrasts with across both directions,
    derived from the concatenation block offsets."""
    return batch_fwd.negative_cells() + batch_bwd.negative_cells()


# --------------------------------------------------------------------------
# optimization

def effective_switches(config: TrainConfig, epoch: int) -> LossSwitches:
    switches = config.switches()
    if epoch < config.warmup_epochs:
        return replace(switches, inter=False, sparse=False)
    return switches


def train_step(state: TrainState, batch: list[TrackedPair], config: TrainConfig,
               codec) -> LossReport:
    """One optimizer update over a batch of tracked pairs."""
    patches = torch.stack([p.reference_patch for p in batch]
                          + [p.target_patch for p in batch])
    grids = state.backbone(patches)
    n = len(batch)
    finite = torch.isfinite(grids).flatten(1).all(dim=1)
    if not bool(finite.all()):
        bad = sorted({int(i) % n for i in (~finite).nonzero().flatten()})
        raise TrainAbort(
            f"non-finite features at epoch {state.epoch} step {state.global_step}, "
            f"batch indices {bad}"
        )
    feats_r = [FeatureMap.from_grid(grids[i]) for i in range(n)]
    feats_t = [FeatureMap.from_grid(grids[n + i]) for i in range(n)]
    images_r = [p.reference_patch for p in batch]
    images_t = [p.target_patch for p in batch]

    switches = effective_switches(config, state.epoch)
    total, report = contrastive_step_losses(feats_t, feats_r, images_t, images_r,
                                            codec, config.temperature, switches)
    if not torch.isfinite(total):
        raise TrainAbort(
            f"non-finite loss at epoch {state.epoch} step {state.global_step}: "
            f"{report}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.global_step += 1
    for key, value in report.components().items():
        state.running[key] = state.running.get(key, 0.0) * 0.98 + value * 0.02
    return report


# --------------------------------------------------------------------------
# checkpoint plumbing

def _state_blobs(state: TrainState) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, p in state.backbone.named_parameters():
        blobs[f"param.{name}"] = p.detach().cpu().numpy()
    opt_state = state.optimizer.state
    for name, p in state.backbone.named_parameters():
        st = opt_state.get(p)
        if st:
            blobs[f"adam.{name}.step"] = np.array(float(st["step"]), dtype=np.float32)
            blobs[f"adam.{name}.exp_avg"] = st["exp_avg"].cpu().numpy()
            blobs[f"adam.{name}.exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
    rng_bytes = state.generator.get_state().numpy()
    blobs["rng.torch"] = rng_bytes.astype(np.float32)
    blobs["state.epoch"] = np.array(float(state.epoch), dtype=np.float32)
    blobs["state.global_step"] = np.array(float(state.global_step), dtype=np.float32)
    for key, value in state.running.items():
        blobs[f"running.{key}"] = np.array(value, dtype=np.float32)
    return blobs


def save_train_checkpoint(path: Path, state: TrainState, config: TrainConfig):
    save_checkpoint(path, config.backbone, _state_blobs(state))


def restore_train_state(path: Path, config: TrainConfig) -> TrainState:
    ckpt_config, blobs = load_checkpoint(path)
    if ckpt_config != config.backbone:
        raise ConfigError(
            f"checkpoint backbone {ckpt_config} does not match config {config.backbone}"
        )
    backbone = Backbone(ckpt_config)
    load_backbone_params(backbone, blobs)
    optimizer = torch.optim.Adam(backbone.parameters(), lr=config.learning_rate)
    # Materialize optimizer state tensors, then overwrite from the blobs.
    for name, p in backbone.named_parameters():
        step_key = f"adam.{name}.step"
        if step_key in blobs:
            optimizer.state[p] = {
                "step": torch.tensor(float(blobs[step_key])),
                "exp_avg": torch.from_numpy(blobs[f"adam.{name}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(blobs[f"adam.{name}.exp_avg_sq"].copy()),
            }
    generator = torch.Generator()
    if "rng.torch" in blobs:
        generator.set_state(torch.from_numpy(blobs["rng.torch"].astype(np.uint8)))
    state = TrainState(backbone=backbone, optimizer=optimizer, generator=generator,
                       epoch=int(blobs["state.epoch"]),
                       global_step=int(blobs["state.global_step"]))
    for key, arr in blobs.items():
        if key.startswith("running."):
            state.running[key[len("running."):]] = float(arr)
    return state


def load_backbone_params(backbone: Backbone, blobs: dict[str, np.ndarray]):
    with torch.no_grad():
        for name, p in backbone.named_parameters():
            key = f"param.{name}"
            if key not in blobs:
                raise ValidationError(f"checkpoint is missing parameter {name}")
            p.copy_(torch.from_numpy(blobs[key].copy()))


def load_backbone(path: str | Path) -> Backbone:
    """Rebuild a backbone (eval mode) from any checkpoint file."""
    config, blobs = load_checkpoint(path)
    backbone = Backbone(config)
    load_backbone_params(backbone, blobs)
    backbone.eval()
    return backbone


# --------------------------------------------------------------------------
# full run

def format_log_line(step: int, lr: float, report: LossReport, wall: float) -> str:
    return (f"step={step} lr={lr:.8f} self={report.self_loss:.6f} "
            f"intra_inter={report.intra_inter_loss:.6f} sparse={report.sparse_loss:.8f} "
            f"cycle={report.cycle_loss:.6f} concentration={report.concentration_loss:.6f} "
            f"total={report.total:.6f} wall={wall:.3f}")


def parse_log_line(line: str) -> dict[str, float]:
    return {k: float(v) for k, v in (kv.split("=") for kv in line.split())}


def run_training(config: TrainConfig, resume: str | Path | None = None) -> Path:
    """Execute the full schedule; returns the final checkpoint path."""
    index = index_dataset(Path(config.dataset))
    if len(index.videos) < config.batch_size:
        raise ConfigError(
            f"dataset has {len(index.videos)} videos, need >= {config.batch_size}"
        )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    codec_frames = None
    codec_ckpt = None
    if config.codec == "learned":
        codec_ckpt = Path(config.codec_ckpt) if config.codec_ckpt else out_dir / "codec.bin"
        if not codec_ckpt.exists():
            codec_frames = [load_frame(v.frames[0]) for v in index.videos[:16]]
    codec = make_codec(config.codec, config.backbone.stride, ckpt_path=codec_ckpt,
                       train_frames=codec_frames, seed=config.seed)

    if resume is not None:
        state = restore_train_state(Path(resume), config)
        log_mode = "a"
    else:
        backbone = Backbone(config.backbone)
        optimizer = torch.optim.Adam(backbone.parameters(), lr=config.learning_rate)
        generator = torch.Generator().manual_seed(config.seed)
        state = TrainState(backbone=backbone, optimizer=optimizer, generator=generator)
        save_train_checkpoint(out_dir / "init.ckpt", state, config)
        log_mode = "w"

    steps_per_epoch = len(index.videos) // config.batch_size
    if config.total_epochs == 0:
        return out_dir / "init.ckpt"
    final_path = out_dir / "final.ckpt"
    with open(out_dir / "train.log", log_mode) as log_file:
        while state.epoch < config.total_epochs:
            state.lr = lr_at_epoch(config.learning_rate, state.epoch,
                                   config.lr_halving_period)
            for group in state.optimizer.param_groups:
                group["lr"] = state.lr
            order = torch.randperm(len(index.videos), generator=state.generator)
            for s in range(steps_per_epoch):
                ids = [int(v) for v in order[s * config.batch_size:
                                             (s + 1) * config.batch_size]]
                t0 = time.perf_counter()
                batch = [build_pair(index.videos[v].frames, config.patch_size,
                                    state.backbone, state.generator) for v in ids]
                report = train_step(state, batch, config, codec)
                log_file.write(format_log_line(state.global_step, state.lr, report,
                                               time.perf_counter() - t0) + "\n")
            state.epoch += 1
            save_train_checkpoint(out_dir / "last.ckpt", state, config)
            if state.epoch % config.snapshot_every == 0:
                save_train_checkpoint(out_dir / f"epoch_{state.epoch:05d}.ckpt",
                                      state, config)
    save_train_checkpoint(final_path, state, config)
    return final_path
