"""Flat key=value configuration files.

One ``key = value`` pair per line, ``#`` starts a comment, blank lines are
ignored, unknown keys are errors.  Backbone fields are addressed with a
``backbone_`` prefix inside training configs.
"""

from __future__ import annotations

from pathlib import Path

from .backbone import BackboneConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .trainer import TrainConfig


def parse_kv_file(path: Path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


_TRAIN_KEYS = {
    "dataset": str,
    "out_dir": str,
    "batch_size": int,
    "patch_size": int,
    "learning_rate": float,
    "lr_halving_period": int,
    "warmup_epochs": int,
    "total_epochs": int,
    "temperature": float,
    "loss_intra": _parse_bool,
    "loss_inter": _parse_bool,
    "loss_sparse": _parse_bool,
    "loss_cycle": _parse_bool,
    "loss_concentration": _parse_bool,
    "seed": int,
    "codec": str,
    "codec_ckpt": str,
    "snapshot_every": int,
    "backbone_stride": int,
    "backbone_channels": int,
    "backbone_depth": int,
    "backbone_seed": int,
    "backbone_kind": str,
}

_SPEC_KEYS = {
    "video_count": int,
    "frames_per_video": int,
    "frame_size": int,
    "objects_per_video": int,
    "motion": str,
    "texture": str,
    "seed": int,
}


def _convert(pairs: dict[str, str], schema: dict, path: Path) -> dict:
    out = {}
    for key, value in pairs.items():
        if key not in schema:
            raise ConfigError(f"{path}: unknown key {key!r}")
        try:
            out[key] = schema[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from exc
    return out


def load_train_config(path: Path, overrides: dict | None = None) -> TrainConfig:
    values = _convert(parse_kv_file(path), _TRAIN_KEYS, Path(path))
    if overrides:
        values.update(overrides)
    backbone_kwargs = {k[len("backbone_"):]: values.pop(k)
                       for k in list(values) if k.startswith("backbone_")}
    try:
        return TrainConfig(backbone=BackboneConfig(**backbone_kwargs), **values)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_synthetic_spec(path: Path, overrides: dict | None = None) -> SyntheticSpec:
    values = _convert(parse_kv_file(path), _SPEC_KEYS, Path(path))
    if overrides:
        values.update(overrides)
    try:
        return SyntheticSpec(**values)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
