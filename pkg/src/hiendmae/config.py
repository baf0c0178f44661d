"""JSON run configuration with strict key checking.

Layout::

    {
      "output_dir": "runs/desk",
      "train":   {TrainConfig scalars: total_steps, warmup_steps, base_lr, ...},
      "encoder": {EncoderConfig fields},
      "decoder": {DecoderConfig fields},
      "augment": {AugmentPolicy fields},
      "data":    {DataConfig fields}
    }

Every section is optional and falls back to the desk defaults; unknown
keys anywhere are an error.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from hiendmae.decoder import DecoderConfig
from hiendmae.encoder import EncoderConfig
from hiendmae.errors import ConfigError, HiEndMAEError
from hiendmae.trainer import DataConfig, TrainConfig
from hiendmae.volume_io import AugmentPolicy

SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "augment": AugmentPolicy,
    "data": DataConfig,
}
TRAIN_SCALARS = ("total_steps", "warmup_steps", "base_lr", "weight_decay", "beta1", "beta2",
                 "batch_size", "mask_ratio", "seed", "variant")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    output_dir: str = "runs/desk"


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, section: str, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in raw.items()})
    except HiEndMAEError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"output_dir", "train", *SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(cls, name, raw.get(name, {})) for name, cls in SECTIONS.items()}
    train_raw = raw.get("train", {})
    if not isinstance(train_raw, dict):
        raise ConfigError("section 'train' must be a JSON object")
    unknown = sorted(set(train_raw) - set(TRAIN_SCALARS))
    if unknown:
        raise ConfigError(f"unknown key(s) in 'train': {', '.join(unknown)}")
    try:
        train = TrainConfig(**train_raw, **parts)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc
    # BadRatio and other validation errors propagate with their own type
    return RunConfig(train, str(raw.get("output_dir", "runs/desk")))


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    t = dataclasses.asdict(cfg.train)
    out = {"output_dir": cfg.output_dir, "train": {k: t[k] for k in TRAIN_SCALARS}}
    for name in SECTIONS:
        out[name] = t[name]
    return out
