"""Versioned binary checkpoint files.

Layout: an 8-byte magic string, a format version, the backbone
configuration (stride, channels, depth, seed, kind), then named blobs of
little-endian 32-bit floats.  Blobs carry backbone parameters plus, for
resumable training checkpoints, optimizer moments, scalar counters, and the
RNG state (raised to float32 byte values).  A sibling ``<name>.manifest.txt``
lists blob names and shapes.  Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .errors import ValidationError

MAGIC = b"VIDCORR1"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, config: BackboneConfig,
                    blobs: dict[str, np.ndarray]):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<iiii", config.stride, config.channels,
                          config.depth, config.seed))
    kind = config.kind.encode()
    buf.write(struct.pack("<H", len(kind)))
    buf.write(kind)
    buf.write(struct.pack("<I", len(blobs)))
    manifest_lines = []
    for name, arr in blobs.items():
        arr32 = np.asarray(arr, dtype="<f4")
        shape = arr32.shape  # before ascontiguousarray, which promotes 0-d to 1-d
        arr32 = np.ascontiguousarray(arr32)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", len(shape)))
        for d in shape:
            buf.write(struct.pack("<i", d))
        buf.write(arr32.tobytes())
        manifest_lines.append(f"{name} {list(shape)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    manifest = path.with_name(path.name + ".manifest.txt")
    tmp_manifest = manifest.with_suffix(".tmp")
    tmp_manifest.write_text("\n".join(manifest_lines) + "\n")
    os.replace(tmp_manifest, manifest)


def load_checkpoint(path: str | os.PathLike) -> tuple[BackboneConfig, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    off = 8
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    stride, channels, depth, seed = struct.unpack_from("<iiii", view, off)
    off += 16
    (kind_len,) = struct.unpack_from("<H", view, off)
    off += 2
    kind = bytes(view[off:off + kind_len]).decode()
    off += kind_len
    config = BackboneConfig(stride=stride, channels=channels, depth=depth,
                            seed=seed, kind=kind)
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    blobs: dict[str, np.ndarray] = {}
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
        blobs[name] = np.frombuffer(view, dtype="<f4", count=numel,
                                    offset=off).reshape(shape).copy()
        off += 4 * numel
    return config, blobs
