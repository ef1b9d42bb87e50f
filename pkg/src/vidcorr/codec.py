"""Frozen encoder/decoder pair between images and transformable embeddings.

The training objective reconstructs a target patch from affinity-weighted
reference embeddings, so the codec defines *what* gets copied.  The default
``color`` codec is deterministic: encoding is an area average over
``stride x stride`` blocks (the embedding is literally the patch colors at
feature resolution) and decoding is bilinear upsampling.  A small learned
convolutional autoencoder is available behind a config switch; it is
pre-trained once on still frames and then frozen, so no gradient ever
reaches codec parameters.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, ValidationError

CODEC_MAGIC = b"VCODEC01"
CODEC_VERSION = 1


@dataclass
class EncodedFrame:
    """Embedding grid at affinity resolution: ``values[c, j]`` per cell."""

    values: Tensor
    grid_height: int
    grid_width: int
    codec_id: str = "color"

    def __post_init__(self):
        n = self.grid_height * self.grid_width
        if self.values.dim() != 2 or self.values.shape[1] != n:
            raise DimensionError(
                f"encoded values of shape {tuple(self.values.shape)} do not match "
                f"a {self.grid_height}x{self.grid_width} grid"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def _check_image(image: Tensor, stride: int):
    if image.dim() != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got shape {tuple(image.shape)}")
    _, h, w = image.shape
    if h % stride or w % stride:
        raise ValidationError(f"image size {h}x{w} is not divisible by stride {stride}")


class ColorCodec:
    """Deterministic codec: block-average encode, bilinear-upsample decode."""

    codec_id = "color"

    def __init__(self, stride: int):
        if stride < 1:
            raise ValidationError("stride must be a positive integer")
        self.stride = stride
        self.channels = 3

    def encode_batch(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) images to (B, 3, H/s, W/s) embedding grids."""
        _check_image(images[0], self.stride)
        return F.avg_pool2d(images, kernel_size=self.stride)

    def decode_batch(self, grids: Tensor) -> Tensor:
        up = F.interpolate(grids, scale_factor=self.stride, mode="bilinear",
                           align_corners=False)
        return up.clamp(0.0, 1.0)

    def encode(self, image: Tensor) -> EncodedFrame:
        _check_image(image, self.stride)
        pooled = self.encode_batch(image.unsqueeze(0)).squeeze(0)
        c, h, w = pooled.shape
        return EncodedFrame(pooled.reshape(c, h * w), h, w, codec_id=self.codec_id)

    def decode(self, encoded: EncodedFrame) -> Tensor:
        grid = encoded.values.reshape(1, encoded.channels, encoded.grid_height,
                                      encoded.grid_width)
        return self.decode_batch(grid).squeeze(0)

    def parameter_vector(self) -> np.ndarray:
        return np.zeros(0, dtype=np.float32)


class LearnedCodec(nn.Module):
    """Three-layer conv autoencoder, frozen after pre-training.

    The encoder downsamples to the backbone grid (bottleneck width
    ``channels``); the decoder mirrors it back to a 3-channel image in [0, 1].
    """

    codec_id = "learned"

    def __init__(self, stride: int, channels: int = 8):
        super().__init__()
        if stride not in (2, 4, 8):
            raise ValidationError("learned codec supports strides 2, 4 and 8")
        self.stride = stride
        self.channels = channels
        n_down = int(round(np.log2(stride)))
        widths = [3, 16, 32, 64][: n_down + 1]
        enc = []
        for i in range(n_down):
            enc += [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                    nn.LeakyReLU(0.1)]
        enc += [nn.Conv2d(widths[n_down], channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(channels, widths[n_down], 3, padding=1), nn.LeakyReLU(0.1)]
        for i in range(n_down, 0, -1):
            dec += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                    nn.Conv2d(widths[i], widths[i - 1], 3, padding=1)]
            if i > 1:
                dec += [nn.LeakyReLU(0.1)]
        self.decoder = nn.Sequential(*dec)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.eval()
        return self

    def encode_batch(self, images: Tensor) -> Tensor:
        _check_image(images[0], self.stride)
        with torch.no_grad():
            return self.encoder(images)

    def decode_batch(self, grids: Tensor) -> Tensor:
        return self.decoder(grids).clamp(0.0, 1.0)

    def encode(self, image: Tensor) -> EncodedFrame:
        grid = self.encode_batch(image.unsqueeze(0)).squeeze(0)
        c, h, w = grid.shape
        return EncodedFrame(grid.reshape(c, h * w), h, w, codec_id=self.codec_id)

    def decode(self, encoded: EncodedFrame) -> Tensor:
        grid = encoded.values.reshape(1, encoded.channels, encoded.grid_height,
                                      encoded.grid_width)
        return self.decode_batch(grid).squeeze(0)

    def parameter_vector(self) -> np.ndarray:
        with torch.no_grad():
            flat = [p.reshape(-1).cpu().numpy().astype(np.float32) for p in self.parameters()]
        return np.concatenate(flat) if flat else np.zeros(0, dtype=np.float32)


def pretrain_learned_codec(frames: list[Tensor], stride: int, seed: int = 0,
                           steps: int = 300, lr: float = 1e-3,
                           channels: int = 8) -> LearnedCodec:
    """Fit the autoencoder on still frames by L2 reconstruction, then freeze."""
    if not frames:
        raise ValidationError("codec pre-training needs at least one frame")
    gen = torch.Generator().manual_seed(seed)
    codec = LearnedCodec(stride, channels=channels)
    with torch.no_grad():
        for p in codec.parameters():
            if p.dim() > 1:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            else:
                p.zero_()
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    stack = torch.stack(frames)
    for step in range(steps):
        idx = torch.randint(0, len(frames), (min(8, len(frames)),), generator=gen)
        batch = stack[idx]
        recon = codec.decoder(codec.encoder(batch))
        loss = ((recon - batch) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return codec.freeze()


def make_codec(kind: str, stride: int, ckpt_path: str | os.PathLike | None = None,
               train_frames: list[Tensor] | None = None, seed: int = 0):
    """Build a codec.  ``learned`` loads from ``ckpt_path`` when it exists,
    otherwise pre-trains on ``train_frames`` (and saves if a path was given)."""
    if kind == "color":
        return ColorCodec(stride)
    if kind != "learned":
        raise ValidationError(f"unknown codec kind {kind!r}")
    if ckpt_path and os.path.exists(ckpt_path):
        return load_codec(ckpt_path)
    if train_frames is None:
        raise ValidationError("learned codec needs a checkpoint or training frames")
    codec = pretrain_learned_codec(train_frames, stride, seed=seed)
    if ckpt_path:
        save_codec(codec, ckpt_path)
    return codec


def save_codec(codec: LearnedCodec, path: str | os.PathLike):
    """Serialize: magic, version, codec id, stride, layer shapes, float32 data."""
    buf = io.BytesIO()
    buf.write(CODEC_MAGIC)
    buf.write(struct.pack("<I", CODEC_VERSION))
    cid = codec.codec_id.encode()
    buf.write(struct.pack("<H", len(cid)))
    buf.write(cid)
    buf.write(struct.pack("<ii", codec.stride, codec.channels))
    params = list(codec.state_dict().items())
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        shape = tuple(tensor.shape)
        buf.write(struct.pack("<B", len(shape)))
        for d in shape:
            buf.write(struct.pack("<i", d))
        buf.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_codec(path: str | os.PathLike) -> LearnedCodec:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if bytes(view[:8]) != CODEC_MAGIC:
        raise ValidationError(f"{path} is not a codec checkpoint")
    off = 8
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != CODEC_VERSION:
        raise ValidationError(f"unsupported codec checkpoint version {version}")
    (cid_len,) = struct.unpack_from("<H", view, off)
    off += 2
    codec_id = bytes(view[off:off + cid_len]).decode()
    off += cid_len
    stride, channels = struct.unpack_from("<ii", view, off)
    off += 8
    if codec_id != "learned":
        raise ValidationError(f"unexpected codec id {codec_id!r} in checkpoint")
    codec = LearnedCodec(stride, channels=channels)
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + name_len]).decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}i", view, off) if ndim else ()
        off += 4 * ndim
        numel = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype="<f4", count=numel, offset=off).reshape(shape)
        off += 4 * numel
        state[name] = torch.from_numpy(arr.copy())
    codec.load_state_dict(state)
    return codec.freeze()
