#!/usr/bin/env python3
"""Desk-scale ablation: train the small backbone with and without the
contrastive objectives, then score mask propagation on held-out synthetic
sequences against a random-init baseline.

Example:
    python3 scripts/desk_ablation.py --out runs/ablation --steps 2000
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from vidcorr.backbone import Backbone, BackboneConfig
from vidcorr.data import SyntheticSpec, generate_synthetic, index_dataset, load_frame, load_mask
from vidcorr.evaluation import jaccard
from vidcorr.propagation import PropagationConfig, propagate_masks
from vidcorr.trainer import TrainConfig, load_backbone, parse_log_line, run_training


def make_train_config(dataset: Path, out_dir: Path, steps: int, warmup_steps: int,
                      batch_size: int, videos: int, lr: float, seed: int,
                      **loss_flags) -> TrainConfig:
    steps_per_epoch = videos // batch_size
    return TrainConfig(
        dataset=str(dataset),
        out_dir=str(out_dir),
        batch_size=batch_size,
        patch_size=64,
        learning_rate=lr,
        lr_halving_period=max(1, (steps // steps_per_epoch) * 2 // 5),
        warmup_epochs=warmup_steps // steps_per_epoch,
        total_epochs=steps // steps_per_epoch,
        temperature=1.0,
        seed=seed,
        snapshot_every=10 ** 6,
        backbone=BackboneConfig(stride=4, channels=64, depth=4, seed=seed),
        **loss_flags,
    )


def mean_jaccard(backbone: Backbone, eval_index, use_mutual: bool,
                 context_frames: int = 7, neighbors: int = 5,
                 temperature: float = 0.07) -> float:
    cfg = PropagationConfig(context_frames=context_frames, neighbors=neighbors,
                            temperature=temperature, use_mutual=use_mutual)
    backbone.eval()
    per_seq = []
    with torch.no_grad():
        for video in eval_index.videos:
            feats = [backbone.features(load_frame(p), normalized=True)
                     for p in video.frames]
            gt0 = load_mask(video.masks[0])
            preds = propagate_masks(feats, gt0, backbone.stride, cfg)
            js = []
            for t in range(1, len(preds)):
                gt = load_mask(video.masks[t])
                ids = sorted(int(c) for c in np.unique(gt) if c != 0) or [1]
                js.append(np.mean([jaccard(preds[t] == c, gt == c) for c in ids]))
            per_seq.append(float(np.mean(js)))
    return float(np.mean(per_seq))


def loss_window_means(log_path: Path, window: int = 100) -> tuple[float, float]:
    rows = [parse_log_line(line) for line in log_path.read_text().splitlines()]
    first = float(np.mean([r["self"] for r in rows[:window]]))
    last = float(np.mean([r["self"] for r in rows[-window:]]))
    return first, last


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/desk_ablation"))
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--warmup-steps", type=int, default=500)
    parser.add_argument("--train-videos", type=int, default=16)
    parser.add_argument("--eval-videos", type=int, default=10)
    parser.add_argument("--frames", type=int, default=20)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-intra-only", action="store_true")
    args = parser.parse_args()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    train_spec = SyntheticSpec(video_count=args.train_videos, frames_per_video=args.frames,
                               frame_size=64, objects_per_video=2, seed=args.seed)
    eval_spec = SyntheticSpec(video_count=args.eval_videos, frames_per_video=args.frames,
                              frame_size=64, objects_per_video=2, seed=args.seed + 1000)
    generate_synthetic(train_spec, out / "train_data")
    generate_synthetic(eval_spec, out / "eval_data")
    eval_index = index_dataset(out / "eval_data")

    results: dict = {"config": vars(args) | {"out": str(out)}}

    t0 = time.time()
    full_cfg = make_train_config(out / "train_data", out / "run_full", args.steps,
                                 args.warmup_steps, args.batch_size, args.train_videos,
                                 args.lr, args.seed)
    full_ckpt = run_training(full_cfg)
    results["full_train_minutes"] = (time.time() - t0) / 60
    first, last = loss_window_means(out / "run_full" / "train.log")
    results["full_self_first100"] = first
    results["full_self_last100"] = last

    if not args.skip_intra_only:
        t0 = time.time()
        intra_cfg = make_train_config(out / "train_data", out / "run_intra", args.steps,
                                      args.warmup_steps, args.batch_size,
                                      args.train_videos, args.lr, args.seed,
                                      loss_inter=False, loss_sparse=False)
        intra_ckpt = run_training(intra_cfg)
        results["intra_train_minutes"] = (time.time() - t0) / 60

    t0 = time.time()
    random_backbone = Backbone(BackboneConfig(stride=4, channels=64, depth=4,
                                              seed=args.seed))
    results["J_random_plain"] = mean_jaccard(random_backbone, eval_index, use_mutual=False)
    results["J_random_mutual"] = mean_jaccard(random_backbone, eval_index, use_mutual=True)
    full_backbone = load_backbone(full_ckpt)
    results["J_full_mutual"] = mean_jaccard(full_backbone, eval_index, use_mutual=True)
    results["J_full_plain"] = mean_jaccard(full_backbone, eval_index, use_mutual=False)
    if not args.skip_intra_only:
        intra_backbone = load_backbone(intra_ckpt)
        results["J_intra_plain"] = mean_jaccard(intra_backbone, eval_index, use_mutual=False)
        results["J_intra_mutual"] = mean_jaccard(intra_backbone, eval_index, use_mutual=True)
    results["eval_minutes"] = (time.time() - t0) / 60

    (out / "results.json").write_text(json.dumps(results, indent=2) + "\n")
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
