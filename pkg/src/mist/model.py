"""Encoder + decoder assembly."""
from __future__ import annotations

from typing import Optional

import numpy as np

from mist.autodiff import Module, ParamStore, Tensor, ops
from mist.decoder import CAMDecoder, DecoderConfig, PredictionMaps
from mist.encoder import EncoderConfig, MaxViTEncoder
from mist.layers import set_dropout_rng


class MIST(Module):
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, image_size: int, seed: Optional[int] = 0):
        rng = None if seed is None else np.random.default_rng(seed)
        self.encoder = MaxViTEncoder(enc_cfg, image_size, rng)
        self.decoder = CAMDecoder(dec_cfg, enc_cfg.stage_widths, image_size, rng)
        self.image_size = image_size

    def forward(self, image: Tensor) -> PredictionMaps:
        return self.decoder(self.encoder(image))

    def predict_proba(self, image: Tensor) -> np.ndarray:
        """Per-pixel class probabilities from the fused map, [N,K,H,W]."""
        return ops.softmax(self.forward(image).fused, axis=1).data

    def param_store(self) -> ParamStore:
        return ParamStore(self.named_parameters())

    def set_rng(self, rng: np.random.Generator) -> None:
        set_dropout_rng(self, rng)

    def parameter_breakdown(self) -> dict:
        return {
            "encoder": self.encoder.num_parameters(),
            "decoder": self.decoder.num_parameters(),
            "total": self.num_parameters(),
        }
