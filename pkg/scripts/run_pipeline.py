#!/usr/bin/env python3
"""End-to-end demo: generate synthetic videos, train briefly, propagate the
first-frame mask of a held-out video, and score it.

Everything goes through the CLI entry points, so this doubles as a usage
reference.  Sizes are deliberately tiny; expect a few minutes on CPU.

    python3 scripts/run_pipeline.py --out runs/demo
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from vidcorr.cli import cli_dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/demo"))
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    spec_file = out / "data.cfg"
    spec_file.write_text(
        "video_count = 8\nframes_per_video = 10\nframe_size = 64\n"
        f"objects_per_video = 2\nseed = {args.seed}\n")
    if cli_dispatch(["gen-data", "--spec", str(spec_file), "--out", str(out / "data")]):
        return 1
    eval_spec = out / "eval.cfg"
    eval_spec.write_text(
        "video_count = 1\nframes_per_video = 10\nframe_size = 64\n"
        f"objects_per_video = 2\nseed = {args.seed + 500}\n")
    if cli_dispatch(["gen-data", "--spec", str(eval_spec), "--out", str(out / "eval_data")]):
        return 1

    epochs = max(1, args.steps // 2)  # 8 train videos, batch 4 -> 2 steps/epoch
    train_file = out / "train.cfg"
    train_file.write_text(
        f"dataset = {out / 'data'}\nout_dir = {out / 'run'}\n"
        "batch_size = 4\npatch_size = 64\nlearning_rate = 0.0003\n"
        f"total_epochs = {epochs}\nwarmup_epochs = {max(1, epochs // 4)}\n"
        f"lr_halving_period = {max(1, epochs // 2)}\n"
        "loss_concentration = false\nsnapshot_every = 1000000\n"
        f"seed = {args.seed}\nbackbone_stride = 4\nbackbone_channels = 64\n")
    if cli_dispatch(["train", "--config", str(train_file)]):
        return 1

    held_out = out / "eval_data" / "video_000"
    if cli_dispatch(["propagate", "--ckpt", str(out / "run" / "final.ckpt"),
                     "--video", str(held_out / "frames"),
                     "--labels", str(held_out / "masks" / "00000.png"),
                     "--task", "mask", "--L", "7", "--k", "5",
                     "--out", str(out / "pred" / "video_000")]):
        return 1

    if cli_dispatch(["eval", "--task", "vos", "--pred", str(out / "pred"),
                     "--gt", str(out / "eval_data"), "--out", str(out / "report.txt")]):
        return 1
    print(f"report written to {out / 'report.txt'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
