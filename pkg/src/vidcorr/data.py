"""Synthetic video generation, dataset indexing, and image file I/O.

Synthetic videos are noise-textured ellipses and convex polygons moving over
a distinct textured background, rendered with exact instance masks and
object-center keypoints.  Textures travel with the objects so colors are a
faithful correspondence signal.  The on-disk layout is::

    <root>/<video_id>/frames/NNNNN.png
    <root>/<video_id>/masks/NNNNN.png       (single-channel, instance ids)
    <root>/<video_id>/keypoints/NNNNN.txt   (one "id x y" line per object)

DAVIS-style trees (``JPEGImages/<seq>/``, ``Annotations/<seq>/``) are also
recognized by the indexer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
# Keeps per-frame motion within the patch tracker's capture range.
MAX_STEP_PX = 6.0


@dataclass
class SyntheticSpec:
    """Parameters of one generated dataset."""

    video_count: int = 16
    frames_per_video: int = 20
    frame_size: int = 64
    objects_per_video: int = 2
    motion: str = "translate"
    texture: str = "noise"
    seed: int = 0

    def __post_init__(self):
        if self.video_count < 1 or self.frames_per_video < 1:
            raise ValidationError("video and frame counts must be positive")
        if self.frame_size < 16:
            raise ValidationError("frame size must be at least 16 pixels")
        if self.objects_per_video < 1:
            raise ValidationError("need at least one object per video")
        if self.motion not in ("static", "translate", "translate+scale"):
            raise ValidationError(f"unknown motion kind {self.motion!r}")
        if self.texture not in ("solid", "noise"):
            raise ValidationError(f"unknown texture kind {self.texture!r}")


@dataclass
class VideoEntry:
    video_id: str
    frames: list[Path]
    masks: list[Path] | None = None
    keypoints: list[Path] | None = None


@dataclass
class DatasetIndex:
    root: Path
    videos: list[VideoEntry]

    def __len__(self) -> int:
        return len(self.videos)


# --------------------------------------------------------------------------
# image file I/O

def save_frame(path: Path, rgb: np.ndarray):
    """Write an (H, W, 3) float [0,1] or uint8 array as PNG."""
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_frame(path: Path) -> torch.Tensor:
    """Read an image file as a (3, H, W) float32 tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_mask(path: Path, mask: np.ndarray):
    """Write an (H, W) integer class/instance map as indexed PNG."""
    if mask.min() < 0 or mask.max() > 255:
        raise ValidationError("mask ids must fit in one byte")
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[: len(_PALETTE)] = _PALETTE
    img.putpalette(palette.reshape(-1).tolist())
    img.save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("P", "L", "I"):
            img = img.convert("L")
        return np.asarray(img, dtype=np.int64)


def save_keypoints(path: Path, points: np.ndarray):
    """Write (K, 3) rows of ``id x y`` (pixel coordinates)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{int(pid)} {x:.3f} {y:.3f}" for pid, x, y in points]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_keypoints(path: Path) -> np.ndarray:
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        pid, x, y = line.split()
        rows.append((int(pid), float(x), float(y)))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


_PALETTE = np.array(
    [[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
     [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
     [210, 245, 60], [250, 190, 190], [0, 128, 128]], dtype=np.uint8)


# --------------------------------------------------------------------------
# synthetic rendering

def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 8,
                  low: float = 0.15, high: float = 0.85) -> np.ndarray:
    """Low-frequency RGB texture: coarse noise bilinearly upsampled."""
    cells = min(cells, size)
    coarse = rng.uniform(low, high, size=(cells, cells, 3))
    if cells == 1:
        return np.broadcast_to(coarse[0, 0], (size, size, 3)).copy()
    xs = np.linspace(0, cells - 1, size)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    fx = xs - x0
    rows = (coarse[x0] * (1 - fx)[:, None, None] + coarse[x0 + 1] * fx[:, None, None])
    cols = (rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x0 + 1] * fx[None, :, None])
    return cols


def _smooth_field(rng: np.random.Generator, size: int, cells: int,
                  amplitude: float) -> np.ndarray:
    """Zero-mean smooth RGB perturbation field."""
    return _smooth_noise(rng, size, cells, low=-amplitude, high=amplitude)


class _SynthObject:
    def __init__(self, rng: np.random.Generator, spec: SyntheticSpec, instance_id: int,
                 taken: list[tuple[np.ndarray, float]] = (),
                 palette: np.ndarray | None = None):
        size = spec.frame_size
        self.instance_id = instance_id
        self.radius = rng.uniform(size / 5.5, size / 3.5)
        margin = self.radius * 1.2 + 2
        self.center = rng.uniform(margin, size - margin, size=2)
        for _ in range(24):  # keep instances separated at spawn
            if all(np.linalg.norm(self.center - c) > 0.8 * (self.radius + r)
                   for c, r in taken):
                break
            self.center = rng.uniform(margin, size - margin, size=2)
        if spec.motion == "static":
            self.velocity = np.zeros(2)
        else:
            speed = rng.uniform(1.0, 3.0)
            angle = rng.uniform(0, 2 * np.pi)
            self.velocity = np.array([np.cos(angle), np.sin(angle)]) * speed
        self.scale_amp = 0.1 if spec.motion == "translate+scale" else 0.0
        self.scale_period = rng.integers(8, 16)
        self.kind = rng.choice(["ellipse", "polygon"])
        if self.kind == "ellipse":
            self.axes = self.radius * rng.uniform(0.7, 1.3, size=2)
            self.vertices = None
        else:
            k = int(rng.integers(3, 6))
            # Jittered even spacing keeps every angular gap below pi, so the
            # half-plane intersection is never empty.
            angles = 2 * np.pi * (np.arange(k) + rng.uniform(-0.4, 0.4, size=k)) / k
            radii = self.radius * rng.uniform(0.7, 1.2, size=k)
            self.vertices = np.stack([np.cos(angles) * radii, np.sin(angles) * radii], axis=1)
        tex_size = int(np.ceil(self.radius * 2 * 1.3)) + 4
        # Instances of one video share a base palette, so telling them apart
        # takes fine-grained texture rather than color.
        if palette is None:
            base = rng.uniform(0.2, 0.8, size=3)
        else:
            base = np.clip(palette + rng.uniform(-0.05, 0.05, size=3), 0.05, 0.95)
        if spec.texture == "noise":
            # Texture varies at a few-pixel scale (smooth field plus faint
            # per-pixel grain): distinctive per cell yet mostly above the
            # feature stride, so colors remain reconstructable.
            field = _smooth_field(rng, tex_size, max(2, tex_size // 3), 0.20)
            grain = rng.normal(0, 0.03, size=(tex_size, tex_size, 3))
            self.texture = np.clip(base[None, None, :] + field + grain, 0.0, 1.0)
        else:
            self.texture = np.broadcast_to(base, (tex_size, tex_size, 3)).copy()

    def step(self, frame_size: int):
        margin = self.radius * (1 + self.scale_amp) + 1
        nxt = self.center + self.velocity
        for axis in range(2):
            if nxt[axis] < margin or nxt[axis] > frame_size - margin:
                self.velocity[axis] = -self.velocity[axis]
        self.center = self.center + self.velocity

    def rasterize(self, frame_size: int, t: int) -> np.ndarray:
        scale = 1.0 + self.scale_amp * np.sin(2 * np.pi * t / self.scale_period)
        ys, xs = np.mgrid[0:frame_size, 0:frame_size]
        dx = (xs + 0.5) - self.center[0]
        dy = (ys + 0.5) - self.center[1]
        if self.kind == "ellipse":
            ax, ay = self.axes * scale
            inside = (dx / ax) ** 2 + (dy / ay) ** 2 <= 1.0
        else:
            verts = self.vertices * scale
            inside = np.ones((frame_size, frame_size), dtype=bool)
            k = len(verts)
            for i in range(k):
                x1, y1 = verts[i]
                x2, y2 = verts[(i + 1) % k]
                cross = (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1)
                inside &= cross >= 0
        return inside, scale

    def paint(self, canvas: np.ndarray, mask: np.ndarray, t: int):
        frame_size = canvas.shape[0]
        inside, scale = self.rasterize(frame_size, t)
        if not inside.any():
            return
        ys, xs = np.nonzero(inside)
        tex = self.texture
        half = tex.shape[0] / 2
        tx = np.clip(((xs + 0.5 - self.center[0]) / scale + half).astype(int),
                     0, tex.shape[1] - 1)
        ty = np.clip(((ys + 0.5 - self.center[1]) / scale + half).astype(int),
                     0, tex.shape[0] - 1)
        canvas[ys, xs] = tex[ty, tx]
        mask[ys, xs] = self.instance_id


def generate_synthetic(spec: SyntheticSpec, out_dir: Path) -> Path:
    """Render the dataset; deterministic for a fixed spec (seed included)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    for v in range(spec.video_count):
        video_dir = out_dir / f"video_{v:03d}"
        background = np.clip(
            _smooth_noise(rng, spec.frame_size)
            + rng.normal(0, 0.02, size=(spec.frame_size, spec.frame_size, 3)),
            0.0, 1.0)
        palette = rng.uniform(0.25, 0.75, size=3)
        objects = []
        for k in range(spec.objects_per_video):
            taken = [(o.center, o.radius) for o in objects]
            objects.append(_SynthObject(rng, spec, k + 1, taken, palette=palette))
        for t in range(spec.frames_per_video):
            canvas = background.copy()
            mask = np.zeros((spec.frame_size, spec.frame_size), dtype=np.uint8)
            points = []
            for obj in objects:
                obj.paint(canvas, mask, t)
                points.append((obj.instance_id, obj.center[0], obj.center[1]))
            save_frame(video_dir / "frames" / f"{t:05d}.png", canvas)
            save_mask(video_dir / "masks" / f"{t:05d}.png", mask)
            save_keypoints(video_dir / "keypoints" / f"{t:05d}.txt",
                           np.array(points, dtype=np.float64))
            for obj in objects:
                obj.step(spec.frame_size)
    return out_dir


# --------------------------------------------------------------------------
# dataset indexing

def _sorted_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def index_dataset(root: Path) -> DatasetIndex:
    """Walk a dataset tree into a validated, sorted index.

    Videos with fewer than two frames are skipped with a warning; an empty
    or unrecognizable root is a configuration error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    videos: list[VideoEntry] = []
    if (root / "JPEGImages").is_dir():
        anno_root = root / "Annotations"
        for seq_dir in sorted((root / "JPEGImages").iterdir()):
            if not seq_dir.is_dir():
                continue
            frames = _sorted_images(seq_dir)
            if len(frames) < 2:
                log.warning("skipping %s: fewer than 2 frames", seq_dir.name)
                continue
            masks = None
            anno_dir = anno_root / seq_dir.name
            if anno_dir.is_dir():
                masks = _sorted_images(anno_dir)
            videos.append(VideoEntry(seq_dir.name, frames, masks=masks))
    else:
        for video_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            frame_dir = video_dir / "frames"
            if not frame_dir.is_dir():
                continue
            frames = _sorted_images(frame_dir)
            if len(frames) < 2:
                log.warning("skipping %s: fewer than 2 frames", video_dir.name)
                continue
            masks = keypoints = None
            if (video_dir / "masks").is_dir():
                masks = _sorted_images(video_dir / "masks")
            if (video_dir / "keypoints").is_dir():
                keypoints = sorted((video_dir / "keypoints").glob("*.txt"))
            videos.append(VideoEntry(video_dir.name, frames, masks=masks,
                                     keypoints=keypoints))
    if not videos:
        raise ConfigError(f"no usable videos found under {root}")
    return DatasetIndex(root, videos)
