"""Encoder + decoder assembled into one trainable masked autoencoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hiendmae import autodiff as ad
from hiendmae.autodiff import Tensor
from hiendmae.decoder import BaselineDecoder, DecoderConfig, DenseDecoder, masked_mse
from hiendmae.encoder import Encoder, EncoderConfig, EncoderTaps
from hiendmae.errors import ConfigError
from hiendmae.nn import Module
from hiendmae.tokenizer import MaskPlan, PatchGrid, patchify
from hiendmae.volume_io import Volume

VARIANTS = ("hiend", "mae")


@dataclass
class ForwardResult:
    loss: Tensor
    pred: Tensor
    target: Tensor
    taps: EncoderTaps


class MaskedAutoencoder(Module):
    """``variant='hiend'`` uses the dense cross-attention decoder, ``'mae'`` the baseline."""

    def __init__(self, enc: EncoderConfig, dec: DecoderConfig, seed: int = 0, variant: str = "hiend"):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(enc, rng)
        if variant == "hiend":
            self.decoder = DenseDecoder(enc, dec, rng)
        else:
            self.decoder = BaselineDecoder(enc, dec, rng)
        self.variant = variant
        self.enc_cfg = enc
        self.dec_cfg = dec
        self.assign_names()

    @property
    def patch_size(self) -> int:
        return self.enc_cfg.patch_size

    def tokens(self, volume: Volume) -> tuple[np.ndarray, PatchGrid]:
        return patchify(volume, self.patch_size)

    def encode(self, tokens: np.ndarray, plan: MaskPlan, grid: PatchGrid, records=None) -> EncoderTaps:
        visible = Tensor(tokens[plan.visible_idx])
        return self.encoder(visible, plan, grid, records)

    def forward(self, tokens: np.ndarray, plan: MaskPlan, grid: PatchGrid,
                enc_records=None, dec_records=None) -> ForwardResult:
        taps = self.encode(tokens, plan, grid, enc_records)
        pred = self.decoder(taps, plan, grid, dec_records)
        target = Tensor(tokens)
        return ForwardResult(masked_mse(pred, target, plan), pred, target, taps)

    def batch_loss(self, samples: list[tuple[np.ndarray, MaskPlan, PatchGrid]]) -> Tensor:
        """Mean of per-sample masked losses."""
        losses = [self.forward(t, p, g).loss for t, p, g in samples]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return ad.scale(total, 1.0 / len(losses))
