"""Umbrella command-line interface.

Subcommands: ``gen-data``, ``train``, ``propagate``, ``eval``,
``track-debug``, ``affinity-dump``.  Exit codes: 0 success, 1 validation or
configuration error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .affinity import affinity_to_image, compute_affinity
from .config import load_synthetic_spec, load_train_config
from .data import (SyntheticSpec, generate_synthetic, load_frame, load_keypoints,
                   load_mask, save_frame, save_keypoints, save_mask)
from .errors import ConfigError, TrainAbort, ValidationError
from .evaluation import (MetricReport, boundary_f, jaccard,
                         keypoint_reference_scale, miou, pck)
from .propagation import PropagationConfig, propagate_keypoints, propagate_masks
from .tracker import crop_patch, random_crop, track_patch
from .trainer import load_backbone, run_training


def _sorted_images(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir()
                  if p.suffix.lower() in (".png", ".jpg", ".jpeg"))


def _video_features(backbone, frame_paths, normalized=True):
    feats = []
    with torch.no_grad():
        for p in frame_paths:
            feats.append(backbone.features(load_frame(p), normalized=normalized))
    return feats


def cmd_gen_data(args) -> int:
    if args.spec:
        overrides = {"seed": args.seed} if args.seed is not None else None
        spec = load_synthetic_spec(Path(args.spec), overrides)
    else:
        spec = SyntheticSpec(seed=args.seed or 0)
    generate_synthetic(spec, Path(args.out))
    print(f"wrote {spec.video_count} videos under {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    config = load_train_config(Path(args.config), overrides)
    final = run_training(config, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_propagate(args) -> int:
    backbone = load_backbone(Path(args.ckpt))
    frames = _sorted_images(Path(args.video))
    if not frames:
        raise ConfigError(f"no frames found in {args.video}")
    cfg = PropagationConfig(context_frames=args.L, neighbors=args.k,
                            temperature=args.temperature, label_kind=args.task,
                            use_mutual=not args.no_mutual)
    feats = _video_features(backbone, frames)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.task == "mask":
        first_mask = load_mask(Path(args.labels))
        masks = propagate_masks(feats, first_mask, backbone.stride, cfg)
        for path, mask in zip(frames, masks):
            save_mask(out_dir / (path.stem + ".png"), mask)
    else:
        points = load_keypoints(Path(args.labels))
        tracks = propagate_keypoints(feats, points, backbone.stride, cfg)
        for path, pts in zip(frames, tracks):
            save_keypoints(out_dir / (path.stem + ".txt"), pts)
    print(f"propagated {len(frames)} frames to {out_dir}")
    return 0


def _match_sequences(pred_root: Path, gt_root: Path, pattern: str) -> list[tuple[str, Path, Path]]:
    """Pair prediction and ground-truth directories by sequence name."""
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    pred_dirs = sorted(p for p in pred_root.iterdir() if p.is_dir())
    if not pred_dirs:
        pred_dirs = [pred_root]
    out = []
    for pred_dir in pred_dirs:
        name = pred_dir.name if pred_dir != pred_root else pred_root.name
        candidates = [gt_root / pred_dir.name / pattern, gt_root / pattern,
                      gt_root / pred_dir.name, gt_root]
        gt_dir = next((c for c in candidates if c.is_dir()), None)
        if gt_dir is None:
            raise ConfigError(f"no ground truth found for sequence {name}")
        out.append((name, pred_dir, gt_dir))
    return out


def cmd_eval(args) -> int:
    report = MetricReport(task=args.task)
    pattern = {"vos": "masks", "semantic": "masks", "keypoint": "keypoints"}[args.task]
    for name, pred_dir, gt_dir in _match_sequences(Path(args.pred), Path(args.gt), pattern):
        if args.task in ("vos", "semantic"):
            pred_files = _sorted_images(pred_dir)
        else:
            pred_files = sorted(pred_dir.glob("*.txt"))
        if not pred_files:
            raise ConfigError(f"no predictions in {pred_dir}")
        # The temporally first prediction is the copied ground truth; skip it.
        pred_files = pred_files[1:] if len(pred_files) > 1 else pred_files
        if args.task == "vos":
            js, fs, n = [], [], 0
            for pf in pred_files:
                gt_path = gt_dir / pf.name
                if not gt_path.exists():
                    raise ConfigError(f"missing ground-truth mask {gt_path}")
                pred, gt = load_mask(pf), load_mask(gt_path)
                obj_ids = sorted(int(c) for c in np.unique(gt) if c != 0) or [1]
                js.append(float(np.mean([jaccard(pred == c, gt == c) for c in obj_ids])))
                fs.append(float(np.mean([boundary_f(pred == c, gt == c,
                                                    radius=args.radius)
                                         for c in obj_ids])))
                n += 1
            report.add_row(name, n, J=float(np.mean(js)), F=float(np.mean(fs)))
        elif args.task == "semantic":
            vals, n = [], 0
            for pf in pred_files:
                gt_path = gt_dir / pf.name
                if not gt_path.exists():
                    raise ConfigError(f"missing ground-truth mask {gt_path}")
                pred, gt = load_mask(pf), load_mask(gt_path)
                count = int(max(pred.max(), gt.max())) + 1
                vals.append(miou(pred, gt, count))
                n += 1
            report.add_row(name, n, mIoU=float(np.mean(vals)))
        else:
            p1, p2, n = [], [], 0
            for pf in pred_files:
                gt_path = gt_dir / pf.name
                if not gt_path.exists():
                    raise ConfigError(f"missing ground-truth keypoints {gt_path}")
                pred, gt = load_keypoints(pf), load_keypoints(gt_path)
                scale = keypoint_reference_scale(gt[:, 1:])
                p1.append(pck(pred[:, 1:], gt[:, 1:], 0.1, scale))
                p2.append(pck(pred[:, 1:], gt[:, 1:], 0.2, scale))
                n += 1
            report.add_row(name, n, PCK_0_1=float(np.mean(p1)),
                           PCK_0_2=float(np.mean(p2)))
    text = report.to_text()
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _draw_box(rgb: np.ndarray, box, color) -> np.ndarray:
    h, w = rgb.shape[:2]
    left, top, right, bottom = box.clamped(h, w).bounds()
    left, top = max(0, left), max(0, top)
    right, bottom = min(w, right), min(h, bottom)
    rgb[top:bottom, left:left + 2] = color
    rgb[top:bottom, right - 2:right] = color
    rgb[top:top + 2, left:right] = color
    rgb[bottom - 2:bottom, left:right] = color
    return rgb


def cmd_track_debug(args) -> int:
    backbone = load_backbone(Path(args.ckpt))
    frames = _sorted_images(Path(args.video))
    if len(frames) < args.frame + 2:
        raise ConfigError(f"need frames {args.frame} and {args.frame + 1} in {args.video}")
    ref = load_frame(frames[args.frame])
    target = load_frame(frames[args.frame + 1])
    gen = torch.Generator().manual_seed(args.seed or 0)
    ref_box = random_crop(ref, args.patch_size, gen)
    patch = crop_patch(ref, ref_box, args.patch_size)
    with torch.no_grad():
        patch_feat = backbone.features(patch)
        frame_feat = backbone.features(target)
    target_box, confidence = track_patch(patch_feat, frame_feat, backbone.stride)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ref_img = (ref.permute(1, 2, 0).numpy() * 255).astype(np.uint8).copy()
    tgt_img = (target.permute(1, 2, 0).numpy() * 255).astype(np.uint8).copy()
    save_frame(out_dir / "reference.png", _draw_box(ref_img, ref_box, (255, 40, 40)))
    save_frame(out_dir / "target.png", _draw_box(tgt_img, target_box, (40, 255, 40)))
    print(f"confidence={confidence:.4f} center=({target_box.center_x:.1f}, "
          f"{target_box.center_y:.1f}) scale={target_box.scale:.3f}")
    return 0


def cmd_affinity_dump(args) -> int:
    backbone = load_backbone(Path(args.ckpt))
    f1, f2 = (load_frame(Path(p)) for p in args.pair)
    with torch.no_grad():
        feat_t = backbone.features(f1, normalized=True)
        feat_r = backbone.features(f2, normalized=True)
    aff = compute_affinity(feat_t, feat_r, temperature=args.temperature)
    img = affinity_to_image(aff)
    Image.fromarray(img, mode="L").save(args.out)
    print(f"wrote {img.shape[0]}x{img.shape[1]} heatmap to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidcorr",
        description="Self-supervised correspondence lab: train on synthetic "
                    "videos, propagate labels, evaluate.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value spec file (defaults used if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the offline training process")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", help="propagate labels through a video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="directory of numbered frames")
    p.add_argument("--labels", required=True, help="first-frame mask or keypoint file")
    p.add_argument("--task", choices=("mask", "keypoint"), required=True)
    p.add_argument("--L", type=int, default=7, help="preceding reference frames")
    p.add_argument("--k", type=int, default=5, help="neighbors kept per cell")
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--no-mutual", action="store_true",
                   help="use the plain affinity instead of mutual correlation")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--task", choices=("vos", "keypoint", "semantic"), required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=None,
                   help="boundary tolerance in pixels (default 0.8%% of diagonal)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track-debug", help="render tracked boxes onto a frame pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_track_debug)

    p = sub.add_parser("affinity-dump", help="dump an affinity heatmap image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pair", nargs=2, required=True, metavar=("TARGET", "REFERENCE"))
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_affinity_dump)
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not getattr(args, "command", None):
        parser.print_usage()
        return 1
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
