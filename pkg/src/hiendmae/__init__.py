"""Hierarchical encoder-driven masked autoencoder for 3D volumes.

A numpy reverse-mode autodiff core, a ViT encoder with intermediate taps,
a dense cross-attention decoder, a pre-training loop and the analysis
tools (effective rank, attention maps, MAC model, decoder benchmark).
"""

from hiendmae.decoder import BaselineDecoder, DecoderConfig, DenseDecoder, masked_mse
from hiendmae.encoder import Encoder, EncoderConfig, EncoderTaps
from hiendmae.model import MaskedAutoencoder
from hiendmae.tokenizer import MaskPlan, PatchGrid, patchify, pos_embed_3d, sample_mask, unpatchify
from hiendmae.trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from hiendmae.volume_io import AugmentPolicy, Volume, load_rvol, preprocess, save_rvol, synth_volume

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "BaselineDecoder", "DecoderConfig", "DenseDecoder", "Encoder", "EncoderConfig",
    "EncoderTaps", "MaskPlan", "MaskedAutoencoder", "PatchGrid", "TrainConfig", "Volume", "load_checkpoint",
    "load_rvol", "masked_mse", "patchify", "pos_embed_3d", "preprocess", "sample_mask", "save_checkpoint",
    "save_rvol", "synth_volume", "train", "unpatchify",
]
