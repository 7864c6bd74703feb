"""Full network assembly: config, parameter init, and the forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .decoder import DecoderConfig, LevelOutputs, decode_pyramid, init_head_params
from .encoder import EncoderConfig, FeaturePyramid, _P, encode, init_encoder_params


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic parameter init.

    Encoder and head draw from independent child streams, so the shared
    head parameters are byte-identical across pyramid depths.
    """
    cfg.validate()
    enc_seq, head_seq = np.random.SeedSequence(seed).spawn(2)
    params = init_encoder_params(cfg.encoder, np.random.default_rng(enc_seq))
    params.update(init_head_params(cfg.encoder.dim, cfg.decoder, np.random.default_rng(head_seq)))
    return params


def forward(features: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig,
            input_stride: int = 1, features_as_leaf: bool = False,
            ) -> tuple[FeaturePyramid, list[LevelOutputs], _P]:
    """Run encoder and decoder on one (input_dim, T) feature array.

    Returns the pyramid, per-level outputs, and the parameter view whose
    cached leaves collect gradients on backward.
    """
    view = _P(params)
    x = ad.leaf(features, "input") if features_as_leaf else ad.const(features)
    pyramid = encode(x, view, cfg.encoder, input_stride)
    outputs = decode_pyramid(pyramid, view, cfg.decoder)
    return pyramid, outputs, view
