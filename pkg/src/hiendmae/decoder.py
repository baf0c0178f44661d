"""Hierarchical encoder-driven dense decoder and the MAE-style baseline.

The dense decoder keeps the full set of N tokens throughout. After a few
self-attention blocks, each cross stage lets every token query the visible
features of one encoder tap layer, deepest tap first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hiendmae import autodiff as ad
from hiendmae.autodiff import Parameter, Tensor
from hiendmae.encoder import Block, EncoderConfig, EncoderTaps
from hiendmae.errors import ConfigError, EmptyMask, ShapeMismatch
from hiendmae.nn import Attention, FeedForward, LayerNorm, Linear, Module, trunc_normal
from hiendmae.tokenizer import MaskPlan, PatchGrid, pos_embed_3d, scatter_index


@dataclass(frozen=True)
class DecoderConfig:
    dec_dim: int = 48
    heads: int = 4
    n_self: int = 2
    n_cross: int = 3
    ffn_ratio: float = 4.0
    stage_to_tap: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.stage_to_tap is not None:
            object.__setattr__(self, "stage_to_tap", tuple(int(t) for t in self.stage_to_tap))
        if self.dec_dim % self.heads:
            raise ConfigError(f"dec_dim {self.dec_dim} not divisible by heads {self.heads}")
        if self.dec_dim % 6:
            raise ConfigError(f"dec_dim {self.dec_dim} must be a multiple of 6 for 3D sin-cos positions")
        if self.n_self < 0 or self.n_cross < 0:
            raise ConfigError("n_self and n_cross must be non-negative")

    @property
    def depth(self) -> int:
        return self.n_self + self.n_cross

    def resolve_taps(self, enc: EncoderConfig) -> tuple[int, ...]:
        """Tap layer read by each cross stage; default is deepest tap first."""
        if self.n_cross == 0:
            return ()
        if self.n_cross != len(enc.tap_layers):
            raise ConfigError(f"n_cross={self.n_cross} must equal the number of tap layers {enc.tap_layers}")
        order = self.stage_to_tap or tuple(sorted(enc.tap_layers, reverse=True))
        if sorted(order) != sorted(enc.tap_layers) or len(order) != self.n_cross:
            raise ConfigError(f"stage_to_tap {order} is not a bijection onto tap layers {enc.tap_layers}")
        return order


class CrossBlock(Module):
    """x + Attn(Q from LN x; K, V from an encoder tap), then + FFN(LN x)."""

    def __init__(self, dim: int, kv_dim: int, heads: int, ffn_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, kv_dim=kv_dim)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, rng)

    def __call__(self, x: Tensor, z: Tensor, record: dict | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), context=z, record=record)
        return x + self.ffn(self.norm2(x))


class _DecoderBase(Module):
    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig, rng: np.random.Generator):
        self.enc_cfg = enc
        self.cfg = cfg
        self.proj = Linear(enc.embed_dim, cfg.dec_dim, rng)
        self.mask_token = Parameter(trunc_normal(rng, (cfg.dec_dim,)), no_decay=True)
        self._pos_cache: dict = {}

    def _init_head(self, rng):
        self.norm = LayerNorm(self.cfg.dec_dim)
        self.head = Linear(self.cfg.dec_dim, self.enc_cfg.patch_size**3, rng)

    def pos_table(self, grid: PatchGrid) -> np.ndarray:
        key = (grid, str(ad.get_dtype()))
        if key not in self._pos_cache:
            self._pos_cache[key] = pos_embed_3d(grid, self.cfg.dec_dim).astype(ad.get_dtype())
        return self._pos_cache[key]

    def build_input(self, taps: EncoderTaps, plan: MaskPlan, grid: PatchGrid) -> Tensor:
        """Projected last-layer tokens at visible rows, mask token elsewhere, plus positions."""
        if taps.final.shape[0] != plan.n_visible:
            raise ShapeMismatch(f"encoder output has {taps.final.shape[0]} rows, plan has {plan.n_visible} visible")
        if grid.n_tokens != plan.n_tokens:
            raise ShapeMismatch(f"grid has {grid.n_tokens} tokens, mask plan {plan.n_tokens}")
        z = self.proj(taps.final)
        stacked = ad.concat([z, ad.reshape(self.mask_token, (1, self.cfg.dec_dim))], axis=0)
        x = ad.gather(stacked, scatter_index(plan), axis=0)
        return x + Tensor(self.pos_table(grid))

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.head(self.norm(x))


class DenseDecoder(_DecoderBase):
    """Self-attention prefix, then one cross stage per tap layer."""

    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__(enc, cfg, rng)
        self.stage_taps = cfg.resolve_taps(enc)
        self.self_blocks = [Block(cfg.dec_dim, cfg.heads, cfg.ffn_ratio, rng) for _ in range(cfg.n_self)]
        self.cross_blocks = [CrossBlock(cfg.dec_dim, enc.embed_dim, cfg.heads, cfg.ffn_ratio, rng)
                             for _ in range(cfg.n_cross)]
        self._init_head(rng)

    def __call__(self, taps: EncoderTaps, plan: MaskPlan, grid: PatchGrid,
                 records: list | None = None) -> Tensor:
        x = self.build_input(taps, plan, grid)
        for block in self.self_blocks:
            x = block(x, record=_new_record(records, "self"))
        for block, layer in zip(self.cross_blocks, self.stage_taps):
            z = taps.taps[layer]
            if z.shape[-1] != self.enc_cfg.embed_dim:
                raise ShapeMismatch(f"tap {layer} width {z.shape[-1]} != embed_dim {self.enc_cfg.embed_dim}")
            x = block(x, z, record=_new_record(records, f"cross<-{layer}"))
        return self.reconstruct(x)


class BaselineDecoder(_DecoderBase):
    """Decoder-driven reconstruction: n_self + n_cross self-attention blocks over all N tokens."""

    def __init__(self, enc: EncoderConfig, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__(enc, cfg, rng)
        self.blocks = [Block(cfg.dec_dim, cfg.heads, cfg.ffn_ratio, rng) for _ in range(cfg.depth)]
        self._init_head(rng)

    def __call__(self, taps: EncoderTaps, plan: MaskPlan, grid: PatchGrid,
                 records: list | None = None) -> Tensor:
        x = self.build_input(taps, plan, grid)
        for block in self.blocks:
            x = block(x, record=_new_record(records, "self"))
        return self.reconstruct(x)


def _new_record(records, kind):
    if records is None:
        return None
    rec = {"kind": kind}
    records.append(rec)
    return rec


def masked_mse(pred: Tensor, target: Tensor, plan: MaskPlan) -> Tensor:
    """Per-voxel mean of squared error over masked tokens only."""
    if plan.masked_idx.size == 0:
        raise EmptyMask("mask plan has no masked tokens (gamma = 0); the loss is undefined")
    if pred.shape[0] != plan.n_tokens:
        raise ShapeMismatch(f"prediction has {pred.shape[0]} rows, plan covers {plan.n_tokens}")
    return ad.masked_mse(pred, target, plan.masked_idx)
