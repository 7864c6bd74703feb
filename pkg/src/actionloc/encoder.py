"""Pyramid encoder: feature projection plus gated multi-granularity blocks.

Each block mixes three views of the sequence
  * instant   - a per-frame channel mix (pointwise linear),
  * local     - a depthwise temporal convolution,
  * global    - a learned filter applied to the sequence spectrum,
gated multiplicatively against each other, followed by group norm and a
feed-forward residual.  Levels are produced by temporal max-pooling, so
level l has length ceil(T / 2^(l-1)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

BRANCHES = ("instant", "local", "global")


@dataclass
class EncoderConfig:
    input_dim: int = 64
    dim: int = 64
    levels: int = 6
    blocks_per_level: int = 1
    groups: int = 8
    ffn_expansion: int = 4
    gate: bool = True
    branches: tuple[str, ...] = BRANCHES

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError(f"encoder.levels must be >= 2, got {self.levels}")
        if self.dim % self.groups != 0:
            raise ValueError(f"encoder.dim {self.dim} not divisible by groups {self.groups}")
        bad = set(self.branches) - set(BRANCHES)
        if bad:
            raise ValueError(f"unknown encoder branches: {sorted(bad)}")
        if not self.branches:
            raise ValueError("encoder.branches must not be empty")
        if self.input_dim < 1 or self.dim < 1 or self.blocks_per_level < 1:
            raise ValueError("encoder dimensions must be positive")


@dataclass
class FeaturePyramid:
    levels: list[Var]
    strides: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh encoder parameters, keyed by path.

    Branch and spectrum convolutions start small so each block opens near
    the identity; the second FFN linear starts at zero for the same reason.
    """
    d, din, h = cfg.dim, cfg.input_dim, cfg.ffn_expansion * cfg.dim
    p: dict[str, np.ndarray] = {}

    def dw(name, channels, scale=1.0):
        p[f"{name}.w"] = rng.normal(0.0, scale / np.sqrt(3.0), (channels, 3))
        p[f"{name}.b"] = np.zeros((channels, 1))

    def pw(name, dout, din_, scale=1.0):
        p[f"{name}.w"] = rng.normal(0.0, scale * np.sqrt(2.0 / din_), (dout, din_))
        p[f"{name}.b"] = np.zeros((dout, 1))

    dw("enc.proj0.dw", din)
    pw("enc.proj0.pw", d, din)
    dw("enc.proj1.dw", d)
    pw("enc.proj1.pw", d, d)

    for lvl in range(1, cfg.levels + 1):
        for blk in range(cfg.blocks_per_level):
            base = f"enc.l{lvl}.b{blk}"
            pw(f"{base}.inst", d, d, scale=0.1)
            dw(f"{base}.local", d, scale=0.1)
            dw(f"{base}.gf1", 2 * d, scale=0.1)
            dw(f"{base}.gf2", 2 * d, scale=0.1)
            p[f"{base}.gn.g"] = np.ones((d, 1))
            p[f"{base}.gn.b"] = np.zeros((d, 1))
            pw(f"{base}.ffn1", h, d)
            p[f"{base}.ffn2.w"] = np.zeros((d, h))
            p[f"{base}.ffn2.b"] = np.zeros((d, 1))
    return p


class _P:
    """Dict of parameter leaves with caching, so shared weights map to one node."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.arrays = params
        self._nodes: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        node = self._nodes.get(name)
        if node is None:
            try:
                node = ad.leaf(self.arrays[name], name)
            except KeyError:
                raise KeyError(f"missing parameter {name!r}") from None
            self._nodes[name] = node
        return node

    def grads(self) -> dict[str, np.ndarray]:
        return {name: (node.grad if node.grad is not None else np.zeros_like(node.value))
                for name, node in self._nodes.items()}


def project_features(x: Var, params: _P, cfg: EncoderConfig) -> Var:
    """Embed raw (input_dim, T) features to (dim, T) with two conv+ReLU stages."""
    if x.value.shape[0] != cfg.input_dim:
        raise ValueError(
            f"input has {x.value.shape[0]} channels, encoder expects {cfg.input_dim}")
    h = ad.depthwise_conv(x, params["enc.proj0.dw.w"], params["enc.proj0.dw.b"])
    h = ad.relu(ad.pointwise(h, params["enc.proj0.pw.w"], params["enc.proj0.pw.b"]))
    h = ad.depthwise_conv(h, params["enc.proj1.dw.w"], params["enc.proj1.dw.b"])
    return ad.relu(ad.pointwise(h, params["enc.proj1.pw.w"], params["enc.proj1.pw.b"]))


def spectrum_filter(x: Var, params: _P, base: str) -> Var:
    """Filter the sequence in the frequency domain with a learned mask.

    The spectrum travels as stacked (real; imag) channels; the mask comes
    from two depthwise convolutions over the frequency axis with a ReLU in
    between, and multiplies the spectrum elementwise (complex product).
    Only the real part of the inverse transform is kept, which equals a
    length-T circular convolution with the real part of the mask's kernel.
    """
    spec = ad.dft(x)
    w = ad.depthwise_conv(spec, params[f"{base}.gf1.w"], params[f"{base}.gf1.b"])
    w = ad.depthwise_conv(ad.relu(w), params[f"{base}.gf2.w"], params[f"{base}.gf2.b"])
    return ad.idft_real(ad.complex_hadamard(spec, w))


def apply_spectrum_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Production filtering path for a fixed complex mask (D, T); test hook."""
    spec = np.fft.fft(np.asarray(x, dtype=np.float64), axis=1)
    return np.fft.ifft(spec * mask, axis=1).real


def mixer_block(x: Var, params: _P, cfg: EncoderConfig, base: str) -> Var:
    """One gated multi-granularity block, shape preserving."""
    use = set(cfg.branches)
    f_instant = (ad.pointwise(x, params[f"{base}.inst.w"], params[f"{base}.inst.b"])
                 if "instant" in use else None)
    f_local = (ad.depthwise_conv(x, params[f"{base}.local.w"], params[f"{base}.local.b"])
               if "local" in use else None)
    f_global = spectrum_filter(x, params, base) if "global" in use else None

    u = x
    if f_instant is not None:
        # instant information gated by the rectified local view
        term = ad.mul(ad.relu(f_local), f_instant) if (cfg.gate and f_local is not None) else f_instant
        u = ad.add(u, term)
    if f_local is not None:
        # local information gated by the rectified global view
        term = ad.mul(ad.relu(f_global), f_local) if (cfg.gate and f_global is not None) else f_local
        u = ad.add(u, term)
    if f_global is not None:
        u = ad.add(u, f_global)

    n = ad.group_norm(u, params[f"{base}.gn.g"], params[f"{base}.gn.b"], cfg.groups)
    h = ad.relu(ad.pointwise(n, params[f"{base}.ffn1.w"], params[f"{base}.ffn1.b"]))
    h = ad.pointwise(h, params[f"{base}.ffn2.w"], params[f"{base}.ffn2.b"])
    return ad.add(u, h)


def _run_blocks(x: Var, params: _P, cfg: EncoderConfig, lvl: int) -> Var:
    for blk in range(cfg.blocks_per_level):
        x = mixer_block(x, params, cfg, f"enc.l{lvl}.b{blk}")
    return x


def build_pyramid(p0: Var, params: _P, cfg: EncoderConfig,
                  input_stride: int = 1) -> FeaturePyramid:
    """Stack of `levels` sequences, each half the length of the one below."""
    t = p0.value.shape[1]
    min_t = 2 ** (cfg.levels - 1)
    if t < min_t:
        raise ValueError(
            f"sequence length {t} too short for {cfg.levels} levels (need >= {min_t})")
    levels = [_run_blocks(p0, params, cfg, 1)]
    strides = [input_stride]
    for lvl in range(2, cfg.levels + 1):
        pooled = ad.max_pool2(levels[-1])
        levels.append(_run_blocks(pooled, params, cfg, lvl))
        strides.append(strides[-1] * 2)
    return FeaturePyramid(levels=levels, strides=strides)


def encode(x: Var, params: _P, cfg: EncoderConfig, input_stride: int = 1) -> FeaturePyramid:
    return build_pyramid(project_features(x, params, cfg), params, cfg, input_stride)
