"""Pre-training loop, AdamW, warmup-cosine schedule and HEMC checkpoints.

HEMC checkpoint layout (little-endian)::

    "HEMC"  u32 version=1  u64 header_len  header (UTF-8 JSON)  blobs

The JSON header echoes the configuration and lists every blob (parameter
values, then Adam first and second moments) with name, shape and byte
offset relative to the start of the blob section. Blobs are raw f32.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from hiendmae import autodiff as ad
from hiendmae.decoder import DecoderConfig
from hiendmae.encoder import EncoderConfig
from hiendmae.errors import (
    BadMagic,
    BadRatio,
    CheckpointError,
    ConfigError,
    DataEmpty,
    NonFiniteGrad,
    NonFiniteLoss,
    ShapeMismatchOnLoad,
    VersionMismatch,
)
from hiendmae.model import MaskedAutoencoder
from hiendmae.tokenizer import patchify, sample_mask
from hiendmae.volume_io import (
    AugmentPolicy,
    Volume,
    augment,
    crop_subvolume,
    load_rvol,
    preprocess,
    random_crop_origin,
    random_phantom,
    synth_volume,
)

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8
CKPT_MAGIC = b"HEMC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    """Either a directory of .rvol files or a synthetic phantom set."""

    rvol_dir: str | None = None
    synth_count: int = 8
    synth_dims: tuple[int, int, int] = (32, 32, 32)
    synth_seed: int = 0
    crop: tuple[int, int, int] = (32, 32, 32)
    clip: tuple[float, float] = (-175.0, 250.0)

    def __post_init__(self):
        object.__setattr__(self, "synth_dims", tuple(int(x) for x in self.synth_dims))
        object.__setattr__(self, "crop", tuple(int(x) for x in self.crop))
        object.__setattr__(self, "clip", tuple(float(x) for x in self.clip))
        if len(self.crop) != 3 or min(self.crop) < 1:
            raise ConfigError(f"crop must be three positive ints, got {self.crop}")
        if self.rvol_dir is None and (self.synth_count < 1 or min(self.synth_dims) < 1):
            raise ConfigError("synthetic data needs synth_count >= 1 and positive synth_dims")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 200
    warmup_steps: int = 20
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 4
    mask_ratio: float = 0.75
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    data: DataConfig = field(default_factory=DataConfig)
    variant: str = "hiend"

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise BadRatio(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.variant not in ("hiend", "mae"):
            raise ConfigError(f"variant must be 'hiend' or 'mae', got {self.variant!r}")
        if any(c % self.encoder.patch_size for c in self.data.crop):
            raise ConfigError(f"crop {self.data.crop} not divisible by patch size {self.encoder.patch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


# Full-scale settings, kept for reference and for the MAC model.
FULL_SCALE = dict(
    total_steps=400_000, warmup_steps=4_000, base_lr=1e-4, weight_decay=0.05,
    beta1=0.9, beta2=0.95, batch_size=192, mask_ratio=0.75,
    encoder=EncoderConfig(patch_size=12, embed_dim=1536, depth=12, heads=16, tap_layers=(3, 6, 9)),
    decoder=DecoderConfig(dec_dim=528, heads=16, n_self=2, n_cross=3),
    data=DataConfig(synth_dims=(96, 96, 96), crop=(96, 96, 96)),
)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then half-cosine decay to zero at total_steps."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({p.name: np.zeros_like(p.data) for p in params},
                   {p.name: np.zeros_like(p.data) for p in params}, 0)


def adamw_step(params, state: OptimizerState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.95, eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Parameters flagged ``no_decay`` (norm gains/biases, linear biases, the
    mask token) skip the decay term. Parameters without a gradient are
    left untouched.
    """
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteGrad(f"non-finite gradient in {p.name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and not p.no_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------- data


def load_dataset(cfg: DataConfig) -> list[Volume]:
    if cfg.rvol_dir is not None:
        files = sorted(Path(cfg.rvol_dir).glob("*.rvol"))
        if not files:
            raise DataEmpty(f"no .rvol files in {cfg.rvol_dir}")
        vols = [load_rvol(f) for f in files]
    else:
        rng = np.random.default_rng(cfg.synth_seed)
        vols = [synth_volume(random_phantom(cfg.synth_dims, rng), cfg.synth_dims, seed=cfg.synth_seed + i,
                             noise_hu=10.0)
                for i in range(cfg.synth_count)]
    if not vols:
        raise DataEmpty("data source produced no volumes")
    for v in vols:
        if any(c > n for c, n in zip(cfg.crop, v.dims)):
            raise ConfigError(f"crop {cfg.crop} larger than volume {v.dims}")
    return vols


def sample_batch(volumes: list[Volume], cfg: TrainConfig, rng: np.random.Generator):
    """Crop, window, augment, tokenise and mask ``batch_size`` random volumes."""
    batch = []
    for _ in range(cfg.batch_size):
        vol = volumes[int(rng.integers(len(volumes)))]
        origin = random_crop_origin(vol.dims, cfg.data.crop, rng)
        x = preprocess(crop_subvolume(vol, origin, cfg.data.crop), *cfg.data.clip)
        x = augment(x, cfg.augment, rng)
        tokens, grid = patchify(x, cfg.encoder.patch_size)
        plan = sample_mask(grid.n_tokens, cfg.mask_ratio, rng)
        batch.append((tokens.astype(ad.get_dtype()), plan, grid))
    return batch


# ---------------------------------------------------------------- training


@dataclass
class Checkpoint:
    config: TrainConfig
    model: MaskedAutoencoder
    opt: OptimizerState
    rng_state: dict
    step: int


def init_state(cfg: TrainConfig) -> Checkpoint:
    model = MaskedAutoencoder(cfg.encoder, cfg.decoder, seed=cfg.seed, variant=cfg.variant)
    rng = np.random.default_rng([cfg.seed, 1])
    return Checkpoint(cfg, model, OptimizerState.zeros_like(model.parameters()),
                      rng.bit_generator.state, 0)


def train(cfg: TrainConfig, *, resume: Checkpoint | None = None, steps: int | None = None,
          metrics_path=None, on_step: Callable[[int, float, float], None] | None = None,
          volumes: list[Volume] | None = None) -> tuple[list[tuple[int, float, float]], Checkpoint]:
    """Run (or continue) pre-training.

    ``steps`` limits how many steps this call performs (default: until
    ``total_steps``). Returns the (step, lr, loss) trace of this call and a
    checkpoint of the final state. The metrics CSV, when requested, is
    flushed after every step.
    """
    state = resume or init_state(cfg)
    if volumes is None:
        volumes = load_dataset(cfg.data)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    params = state.model.parameters()
    end = cfg.total_steps if steps is None else min(cfg.total_steps, state.step + steps)
    trace = []
    fh = writer = None
    if metrics_path is not None:
        new = resume is None or not Path(metrics_path).exists()
        fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["step", "lr", "loss"])
    try:
        with ad.precision(32):
            while state.step < end:
                step = state.step
                lr = lr_schedule(step, cfg)
                batch = sample_batch(volumes, cfg, rng)
                state.model.zero_grad()
                loss = state.model.batch_loss(batch)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLoss(step, value)
                loss.backward()
                adamw_step(params, state.opt, lr, cfg.weight_decay, cfg.beta1, cfg.beta2)
                state.step += 1
                trace.append((step, lr, value))
                if writer is not None:
                    writer.writerow([step, repr(lr), repr(value)])
                    fh.flush()
                if on_step is not None:
                    on_step(step, lr, value)
                log.debug("step %d lr %.3e loss %.6f", step, lr, value)
    finally:
        if fh is not None:
            fh.close()
        state.rng_state = rng.bit_generator.state
    state.model.zero_grad()
    return trace, state


def read_metrics(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- checkpoints


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["encoder"] = EncoderConfig(**d["encoder"])
    d["decoder"] = DecoderConfig(**d["decoder"])
    aug = dict(d["augment"])
    aug["rotate_planes"] = tuple(tuple(p) for p in aug["rotate_planes"])
    for key in ("scale_range", "shift_range", "flip_axes"):
        aug[key] = tuple(aug[key])
    d["augment"] = AugmentPolicy(**aug)
    d["data"] = DataConfig(**d["data"])
    return TrainConfig(**d)


def save_checkpoint(state: Checkpoint, path) -> None:
    blobs = []
    manifest = []
    offset = 0
    params = state.model.parameters()
    for kind, source in (("param", {p.name: p.data for p in params}), ("m", state.opt.m), ("v", state.opt.v)):
        for p in params:
            arr = np.ascontiguousarray(source[p.name], dtype="<f4")
            manifest.append({"kind": kind, "name": p.name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "config": state.config.to_dict(),
        "variant": state.model.variant,
        "step": state.step,
        "adam_t": state.opt.t,
        "rng_state": state.rng_state,
        "manifest": manifest,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: expected magic {CKPT_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    return header, raw[16 + hlen:]


def load_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    """Restore a checkpoint; with ``expect``, parameters must match that model's shapes."""
    header, blob = read_checkpoint_header(path)
    saved_cfg = _config_from_dict(header["config"])
    cfg = expect or saved_cfg
    model = MaskedAutoencoder(cfg.encoder, cfg.decoder, seed=cfg.seed, variant=cfg.variant)
    params = {p.name: p for p in model.parameters()}
    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params:
            raise ShapeMismatchOnLoad(f"checkpoint parameter {name} does not exist in the model")
        if params[name].shape != shape:
            raise ShapeMismatchOnLoad(f"parameter {name}: checkpoint shape {shape}, model shape {params[name].shape}")
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(blob):
            raise CheckpointError(f"{path}: blob for {name} is truncated")
        arrays[entry["kind"]][name] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
    missing = set(params) - set(arrays["param"])
    if missing:
        raise ShapeMismatchOnLoad(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in params.items():
        p.data = arrays["param"][name].astype(np.float32)
    opt = OptimizerState({n: arrays["m"][n].astype(np.float32) for n in params},
                         {n: arrays["v"][n].astype(np.float32) for n in params}, int(header["adam_t"]))
    return Checkpoint(cfg, model, opt, header["rng_state"], int(header["step"]))
