"""ViT encoder over visible tokens with intermediate tap outputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hiendmae import autodiff as ad
from hiendmae.autodiff import Tensor
from hiendmae.errors import ConfigError, ShapeMismatch
from hiendmae.nn import Attention, FeedForward, LayerNorm, Linear, Module
from hiendmae.tokenizer import MaskPlan, PatchGrid, pos_embed_3d


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 8
    heads: int = 4
    ffn_ratio: float = 4.0
    tap_layers: tuple[int, ...] = (2, 4, 6)

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        if self.patch_size < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError(f"patch_size, depth and heads must be positive: {self}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 6:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a multiple of 6 for 3D sin-cos positions")
        taps = self.tap_layers
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > self.depth:
            raise ConfigError(f"tap_layers {taps} must be non-empty, strictly ascending, within [1, {self.depth}]")


class Block(Module):
    """Pre-norm transformer block: x + MHSA(LN x), then + FFN(LN x)."""

    def __init__(self, dim: int, heads: int, ffn_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, rng)

    def __call__(self, x: Tensor, record: dict | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), record=record)
        return x + self.ffn(self.norm2(x))


@dataclass
class EncoderTaps:
    """Visible-token features: raw outputs of each tap layer plus the normed last layer."""

    taps: dict[int, Tensor]
    final: Tensor
    last_raw: Tensor = field(repr=False, default=None)

    @property
    def n_visible(self) -> int:
        return self.final.shape[0]

    def matrices(self) -> list[Tensor]:
        return [*self.taps.values(), self.final]

    def replaced(self, layer: int, value: Tensor) -> "EncoderTaps":
        taps = dict(self.taps)
        taps[layer] = value
        return EncoderTaps(taps, self.final, self.last_raw)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_size**3, cfg.embed_dim, rng)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.ffn_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)
        self._pos_cache: dict = {}

    def pos_table(self, grid: PatchGrid) -> np.ndarray:
        key = (grid, str(ad.get_dtype()))
        if key not in self._pos_cache:
            self._pos_cache[key] = pos_embed_3d(grid, self.cfg.embed_dim).astype(ad.get_dtype())
        return self._pos_cache[key]

    def embed(self, visible_patches: Tensor, plan: MaskPlan, grid: PatchGrid) -> Tensor:
        """Linear patch projection plus the positional row of each visible token."""
        if visible_patches.shape != (plan.n_visible, self.cfg.patch_size**3):
            raise ShapeMismatch(f"visible patches {visible_patches.shape} vs "
                                f"({plan.n_visible}, {self.cfg.patch_size ** 3})")
        if grid.n_tokens != plan.n_tokens:
            raise ShapeMismatch(f"grid has {grid.n_tokens} tokens, mask plan {plan.n_tokens}")
        pos = self.pos_table(grid)[plan.visible_idx]
        return self.patch_embed(visible_patches) + Tensor(pos)

    def encode(self, x: Tensor, records: list | None = None) -> EncoderTaps:
        """Run every block, snapshotting tap layers; the last output gets a final layer-norm.

        ``records``, when given, receives one dict per block with that
        block's attention probabilities and value projection.
        """
        taps: dict[int, Tensor] = {}
        tap_set = set(self.cfg.tap_layers)
        for layer, block in enumerate(self.blocks, start=1):
            rec = None
            if records is not None:
                rec = {}
                records.append(rec)
            x = block(x, record=rec)
            if layer in tap_set:
                taps[layer] = x
        return EncoderTaps(taps, self.norm(x), x)

    def __call__(self, visible_patches: Tensor, plan: MaskPlan, grid: PatchGrid,
                 records: list | None = None) -> EncoderTaps:
        return self.encode(self.embed(visible_patches, plan, grid), records)
