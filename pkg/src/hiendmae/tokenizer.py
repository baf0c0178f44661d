"""Patch tokenisation, random masking and fixed 3D sin-cos positions.

Tokens are always ordered row-major over the patch grid in (d, h, w)
order, and voxels inside a patch are row-major in (d, h, w) as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hiendmae.errors import BadDim, BadRatio, IndexOutOfRange, IndivisibleDims, ShapeMismatch
from hiendmae.volume_io import Volume


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    grid: tuple[int, int, int]

    @property
    def n_tokens(self) -> int:
        gd, gh, gw = self.grid
        return gd * gh * gw

    @property
    def patch_voxels(self) -> int:
        return self.patch**3

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(g * self.patch for g in self.grid)

    @classmethod
    def for_dims(cls, dims: Sequence[int], patch: int) -> "PatchGrid":
        if patch < 1:
            raise IndivisibleDims(f"patch size must be positive, got {patch}")
        bad = [n for n in dims if n % patch]
        if bad:
            raise IndivisibleDims(f"dims {tuple(dims)} not divisible by patch size {patch}")
        return cls(patch, tuple(n // patch for n in dims))

    def coords(self) -> np.ndarray:
        """(N, 3) integer grid coordinates of every token in token order."""
        gd, gh, gw = self.grid
        d, h, w = np.meshgrid(np.arange(gd), np.arange(gh), np.arange(gw), indexing="ij")
        return np.stack([d.ravel(), h.ravel(), w.ravel()], axis=1)


def patchify(v: Volume, patch: int) -> tuple[np.ndarray, PatchGrid]:
    """Split a volume into an (N, P^3) token matrix."""
    grid = PatchGrid.for_dims(v.dims, patch)
    gd, gh, gw = grid.grid
    p = patch
    x = v.data.reshape(gd, p, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(grid.n_tokens, p**3)), grid


def unpatchify(tokens: np.ndarray, grid: PatchGrid, spacing_mm=(1.5, 1.5, 1.5)) -> Volume:
    tokens = np.asarray(tokens)
    if tokens.shape != (grid.n_tokens, grid.patch_voxels):
        raise ShapeMismatch(f"tokens {tokens.shape} do not match grid {grid.grid} with P={grid.patch}")
    gd, gh, gw = grid.grid
    p = grid.patch
    x = tokens.reshape(gd, gh, gw, p, p, p).transpose(0, 3, 1, 4, 2, 5)
    return Volume(x.reshape(gd * p, gh * p, gw * p), spacing_mm)


@dataclass(frozen=True, eq=False)
class MaskPlan:
    gamma: float
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    @property
    def n_visible(self) -> int:
        return len(self.visible_idx)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (self.gamma == other.gamma
                and np.array_equal(self.visible_idx, other.visible_idx)
                and np.array_equal(self.masked_idx, other.masked_idx))

    @classmethod
    def from_visible(cls, visible: Sequence[int], n: int, gamma: float | None = None) -> "MaskPlan":
        vis = np.unique(np.asarray(visible, dtype=np.int64))
        if vis.size and (vis[0] < 0 or vis[-1] >= n):
            raise IndexOutOfRange(f"visible indices outside [0, {n})")
        masked = np.setdiff1d(np.arange(n, dtype=np.int64), vis)
        if gamma is None:
            gamma = masked.size / n
        return cls(float(gamma), vis, masked)

    @classmethod
    def full(cls, n: int) -> "MaskPlan":
        return cls(0.0, np.arange(n, dtype=np.int64), np.zeros(0, dtype=np.int64))


def n_visible(n: int, gamma: float) -> int:
    return n - int(np.floor(gamma * n))


def sample_mask(n: int, gamma: float, rng: np.random.Generator) -> MaskPlan:
    """Random visible/masked split; the first N - floor(gamma N) shuffled indices stay visible."""
    if not 0.0 <= gamma < 1.0:
        raise BadRatio(f"mask ratio must lie in [0, 1), got {gamma}")
    if n < 1:
        raise BadRatio(f"token count must be positive, got {n}")
    perm = np.arange(n, dtype=np.int64)
    # Fisher-Yates, walking down from the end
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    m = n_visible(n, gamma)
    return MaskPlan(float(gamma), np.sort(perm[:m]), np.sort(perm[m:]))


def pos_embed_3d(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed (N, dim) sin-cos table: one third of the channels per axis.

    Within an axis block, channel 2k holds sin(coord * w_k) and 2k+1 holds
    cos(coord * w_k) with w_k = 10000^(-2k / (dim/3)).
    """
    if dim < 6 or dim % 6:
        raise BadDim(f"positional embedding dim must be a positive multiple of 6, got {dim}")
    block = dim // 3
    k = np.arange(block // 2, dtype=np.float64)
    omega = 1.0 / 10000.0 ** (2.0 * k / block)
    coords = grid.coords().astype(np.float64)
    table = np.empty((grid.n_tokens, dim), dtype=np.float64)
    for axis in range(3):
        angles = coords[:, axis:axis + 1] * omega[None, :]
        sub = table[:, axis * block:(axis + 1) * block]
        sub[:, 0::2] = np.sin(angles)
        sub[:, 1::2] = np.cos(angles)
    return table


def gather_visible(tokens: np.ndarray, plan: MaskPlan) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[0] != plan.n_tokens:
        raise IndexOutOfRange(f"{tokens.shape[0]} tokens but mask plan covers {plan.n_tokens}")
    return tokens[plan.visible_idx]


def scatter_index(plan: MaskPlan) -> np.ndarray:
    """Row map for scattering: visible token i -> its row, masked -> M (the fill row)."""
    idx = np.full(plan.n_tokens, plan.n_visible, dtype=np.int64)
    idx[plan.visible_idx] = np.arange(plan.n_visible)
    return idx


def scatter_full(visible_rows: np.ndarray, fill_row: np.ndarray, plan: MaskPlan) -> np.ndarray:
    visible_rows = np.asarray(visible_rows)
    if visible_rows.shape[0] != plan.n_visible:
        raise IndexOutOfRange(f"{visible_rows.shape[0]} rows for {plan.n_visible} visible indices")
    stacked = np.concatenate([visible_rows, np.asarray(fill_row).reshape(1, -1)], axis=0)
    return stacked[scatter_index(plan)]
