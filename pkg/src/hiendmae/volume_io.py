"""3D volumes: the RVOL on-disk format, CT-style preprocessing, cropping,
synthetic phantoms and training-time augmentation.

RVOL layout (little-endian, no padding)::

    "RVOL"  u32 version=1  u32 dtype=1 (f32)  u32 ndim=3
    u64 D  u64 H  u64 W    f64 sd  f64 sh  f64 sw
    D*H*W f32 values, width fastest
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hiendmae.errors import (
    BadMagic,
    BadRange,
    BadSpec,
    DimOverflow,
    IoFailure,
    OutOfBounds,
    TruncatedFile,
    UnsupportedDtype,
)

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIII3Q3d")

HU_MIN, HU_MAX = -1000.0, 1000.0
BACKGROUND_HU = -1000.0
CLIP_LO, CLIP_HI = -175.0, 250.0


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense scalar field indexed [d, h, w] with voxel spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimOverflow(f"volume needs three positive dims, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims}, spacing_mm={self.spacing_mm})"


def load_rvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != RVOL_MAGIC:
        raise BadMagic(f"{path}: expected magic {RVOL_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    _, version, dtype, ndim, d, h, w, sd, sh, sw = _HEADER.unpack_from(raw)
    if version != RVOL_VERSION:
        raise UnsupportedDtype(f"{path}: unsupported RVOL version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"{path}: dtype code {dtype} (only 1 = f32 is supported)")
    if ndim != 3:
        raise UnsupportedDtype(f"{path}: ndim {ndim} (only 3 is supported)")
    if 0 in (d, h, w):
        raise DimOverflow(f"{path}: zero-sized dimension in {(d, h, w)}")
    count = d * h * w
    if count * 4 >= 2**63:
        raise DimOverflow(f"{path}: dims {(d, h, w)} overflow a 64-bit byte count")
    payload = raw[_HEADER.size:]
    if len(payload) < count * 4:
        raise TruncatedFile(f"{path}: expected {count} values, payload has {len(payload) // 4}")
    data = np.frombuffer(payload, dtype="<f4", count=count).reshape(d, h, w)
    return Volume(data.astype(np.float32), (sd, sh, sw))


def save_rvol(v: Volume, path) -> None:
    d, h, w = v.dims
    header = _HEADER.pack(RVOL_MAGIC, RVOL_VERSION, DTYPE_F32, 3, d, h, w, *v.spacing_mm)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(v.data.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def preprocess(v: Volume, clip_lo: float = CLIP_LO, clip_hi: float = CLIP_HI) -> Volume:
    """Clip to [clip_lo, clip_hi] and rescale linearly to [0, 1]."""
    if not clip_lo < clip_hi:
        raise BadRange(f"clip_lo ({clip_lo}) must be below clip_hi ({clip_hi})")
    x = np.clip(v.data.astype(np.float64), clip_lo, clip_hi)
    out = (x - clip_lo) / (clip_hi - clip_lo)
    return Volume(np.clip(out, 0.0, 1.0), v.spacing_mm)


def crop_subvolume(v: Volume, origin: Sequence[int], size: Sequence[int]) -> Volume:
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if len(origin) != 3 or len(size) != 3:
        raise OutOfBounds("origin and size must have three components")
    for o, s, n in zip(origin, size, v.dims):
        if o < 0 or s < 1 or o + s > n:
            raise OutOfBounds(f"crop origin {origin} size {size} exceeds dims {v.dims}")
    d, h, w = origin
    sd, sh, sw = size
    return Volume(v.data[d:d + sd, h:h + sh, w:w + sw].copy(), v.spacing_mm)


def random_crop_origin(dims, size, rng: np.random.Generator) -> tuple[int, int, int]:
    """Uniform over all valid crop origins."""
    if any(s > n for s, n in zip(size, dims)):
        raise OutOfBounds(f"crop size {tuple(size)} larger than volume {tuple(dims)}")
    return tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class Shape:
    """One painted primitive of a synthetic phantom.

    kind is ``sphere`` (center, radius), ``box`` (center, half extents in
    ``size``) or ``tube`` (axis-aligned cylinder: center, radius, ``axis``
    and half ``length``). Coordinates are in voxels, (d, h, w) order.
    """

    kind: str
    center: tuple[float, float, float]
    intensity: float
    radius: float = 0.0
    size: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: int = 0
    length: float = 0.0


def _shape_mask(s: Shape, grid) -> np.ndarray:
    zd, zh, zw = grid
    cd, ch, cw = s.center
    if s.kind == "sphere":
        return (zd - cd) ** 2 + (zh - ch) ** 2 + (zw - cw) ** 2 <= s.radius**2
    if s.kind == "box":
        hd, hh, hw = s.size
        return (np.abs(zd - cd) <= hd) & (np.abs(zh - ch) <= hh) & (np.abs(zw - cw) <= hw)
    if s.kind == "tube":
        coords = (zd - cd, zh - ch, zw - cw)
        along = coords[s.axis]
        across = [c for i, c in enumerate(coords) if i != s.axis]
        return (across[0] ** 2 + across[1] ** 2 <= s.radius**2) & (np.abs(along) <= s.length)
    raise BadSpec(f"unknown shape kind {s.kind!r}")


def synth_volume(shapes: Sequence[Shape], dims: Sequence[int], seed: int = 0,
                 noise_hu: float = 0.0, spacing_mm=(1.5, 1.5, 1.5)) -> Volume:
    """Paint shapes (last wins) onto a -1000 HU background.

    ``seed`` only drives the optional Gaussian noise, so the result is a
    pure function of (shapes, dims, seed, noise_hu).
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise BadSpec(f"dims must be three positive integers, got {dims}")
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    out = np.full(dims, BACKGROUND_HU, dtype=np.float64)
    for s in shapes:
        if not HU_MIN <= s.intensity <= HU_MAX:
            raise BadSpec(f"intensity {s.intensity} outside [{HU_MIN}, {HU_MAX}]")
        out[_shape_mask(s, grid)] = s.intensity
    if noise_hu > 0:
        out += np.random.default_rng(seed).normal(0.0, noise_hu, dims)
        np.clip(out, HU_MIN, HU_MAX, out=out)
    return Volume(out, spacing_mm)


def random_phantom(dims: Sequence[int], rng: np.random.Generator) -> list[Shape]:
    """A CT-like layout: soft-tissue body, a few organs, a bone and a vessel."""
    dims = np.asarray(dims, dtype=np.float64)
    c = dims / 2.0
    r = float(dims.min())
    shapes = [Shape("sphere", tuple(c + rng.uniform(-0.05, 0.05, 3) * dims),
                    float(rng.uniform(-40, 20)), radius=float(rng.uniform(0.42, 0.5) * r))]
    for _ in range(int(rng.integers(2, 5))):
        kind = "sphere" if rng.random() < 0.6 else "box"
        center = tuple(c + rng.uniform(-0.25, 0.25, 3) * dims)
        hu = float(rng.uniform(-120, 220))
        if kind == "sphere":
            shapes.append(Shape("sphere", center, hu, radius=float(rng.uniform(0.08, 0.2) * r)))
        else:
            shapes.append(Shape("box", center, hu, size=tuple(rng.uniform(0.06, 0.16, 3) * r)))
    shapes.append(Shape("tube", tuple(c + rng.uniform(-0.2, 0.2, 3) * dims), float(rng.uniform(150, 250)),
                        radius=float(rng.uniform(0.04, 0.08) * r), axis=int(rng.integers(0, 3)),
                        length=float(0.4 * r)))
    shapes.append(Shape("sphere", tuple(c + rng.uniform(-0.2, 0.2, 3) * dims), float(rng.uniform(500, 1000)),
                        radius=float(rng.uniform(0.05, 0.1) * r)))
    return shapes


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    p_flip: float = 0.5
    p_rotate90: float = 0.3
    p_intensity_scale: float = 0.1
    p_intensity_shift: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    flip_axes: tuple[int, ...] = (0, 1, 2)
    rotate_planes: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2))

    def __post_init__(self):
        for name in ("p_flip", "p_rotate90", "p_intensity_scale", "p_intensity_shift"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise BadSpec(f"{name}={p} is not a probability")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise BadSpec(f"scale_range {self.scale_range} must be positive and ordered")
        if self.shift_range[0] > self.shift_range[1]:
            raise BadSpec(f"shift_range {self.shift_range} is not ordered")
        if not self.flip_axes or not self.rotate_planes:
            raise BadSpec("flip_axes and rotate_planes must be non-empty")


NO_AUGMENT = AugmentPolicy(0.0, 0.0, 0.0, 0.0)


def augment(v: Volume, policy: AugmentPolicy, rng: np.random.Generator) -> Volume:
    """Random flip, 90-degree rotation, intensity scale and shift; clamps to [0, 1].

    Each transform draws its gate first, so the number of random draws
    per call depends only on which transforms fire.
    """
    x = v.data
    changed = False
    if rng.random() < policy.p_flip:
        axis = policy.flip_axes[int(rng.integers(len(policy.flip_axes)))]
        x = np.flip(x, axis=axis)
        changed = True
    if rng.random() < policy.p_rotate90:
        plane = policy.rotate_planes[int(rng.integers(len(policy.rotate_planes)))]
        k = int(rng.integers(1, 4))
        x = np.rot90(x, k=k, axes=plane)
        changed = True
    if rng.random() < policy.p_intensity_scale:
        x = x * np.float32(rng.uniform(*policy.scale_range))
        changed = True
    if rng.random() < policy.p_intensity_shift:
        x = x + np.float32(rng.uniform(*policy.shift_range))
        changed = True
    if not changed:
        return v
    return Volume(np.clip(x, 0.0, 1.0), v.spacing_mm)
