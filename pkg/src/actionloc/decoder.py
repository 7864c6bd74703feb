"""Detection heads over the feature pyramid.

Classification and boundary regression read different mixes of the
pyramid: the classification path folds in the coarser neighbour level,
the regression path folds in the finer one, and a refinement stage uses
both neighbours to adjust the coarse predictions.  One shared set of
head parameters serves every level; the bottom and top levels, which
lack a neighbour on one side, run the same heads directly on their own
features and skip refinement.

Boundary offsets are predicted as the expectation over B+1 distance
bins: softmax over (boundary logit at the shifted instant + per-instant
bin logit), which keeps offsets inside [0, B] grid units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .encoder import FeaturePyramid, _P

FUSIONS = ("attention", "add", "concat")

# classification outputs start near this probability (detection prior)
_CLS_PRIOR = 0.01


@dataclass
class DecoderConfig:
    classes: int = 5
    bins: int = 16
    fusion: str = "attention"
    decouple: bool = True
    refine_cls: bool = True
    refine_reg: bool = True

    def validate(self) -> None:
        if self.classes < 1:
            raise ValueError(f"decoder.classes must be >= 1, got {self.classes}")
        if self.bins < 1:
            raise ValueError(f"decoder.bins must be >= 1, got {self.bins}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"decoder.fusion must be one of {FUSIONS}, got {self.fusion!r}")


@dataclass
class LevelOutputs:
    """Per-level prediction maps; boundaries are in level grid units."""
    cls_coarse: Var      # (C, T) in (0, 1)
    start_coarse: Var    # (1, T)
    end_coarse: Var      # (1, T)
    cls_refined: Var
    start_refined: Var
    end_refined: Var

    @property
    def length(self) -> int:
        return self.cls_coarse.value.shape[1]


def init_head_params(dim: int, cfg: DecoderConfig,
                     rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Shared head parameters; prediction layers start at zero so the
    network opens with flat scores, centered bins and no refinement."""
    p: dict[str, np.ndarray] = {}
    d = dim
    cls_bias = math.log(_CLS_PRIOR / (1.0 - _CLS_PRIOR))

    def dw(name, channels, scale=1.0):
        p[f"{name}.w"] = rng.normal(0.0, scale / np.sqrt(3.0), (channels, 3))
        p[f"{name}.b"] = np.zeros((channels, 1))

    def pw(name, dout, din):
        p[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / din), (dout, din))
        p[f"{name}.b"] = np.zeros((dout, 1))

    def zero_pw(name, dout, din, bias=0.0):
        p[f"{name}.w"] = np.zeros((dout, din))
        p[f"{name}.b"] = np.full((dout, 1), bias)

    def block(name):
        dw(f"{name}.dw", d)
        pw(f"{name}.pw", d, d)
        p[f"{name}.ln.g"] = np.ones((d, 1))
        p[f"{name}.ln.b"] = np.zeros((d, 1))

    def fuse_side(name):
        dw(f"{name}.refine", d)
        zero_pw(f"{name}.att", d, d)
        if cfg.fusion == "concat":
            pw(f"{name}.cat", d, 2 * d)

    # classification path: upsampled coarser neighbour + 3-conv head
    dw("head.dcm.up", d)
    fuse_side("head.dcm")
    block("head.cls.b0")
    block("head.cls.b1")
    zero_pw("head.cls.out", cfg.classes, d, bias=cls_bias)

    # regression path: downsampled finer neighbour + binned boundary head
    dw("head.drm.down", d)
    fuse_side("head.drm")
    for branch, out_ch in (("start", 1), ("end", 1), ("center", 2 * (cfg.bins + 1))):
        block(f"head.reg.{branch}")
        zero_pw(f"head.reg.{branch}.out", out_ch, d)

    # refinement: both neighbours fused, then class / offset adjustments
    dw("head.fuse.down", d)
    dw("head.fuse.up", d)
    block("head.radj.b0")
    block("head.radj.b1")
    zero_pw("head.radj.out", cfg.classes, d, bias=cls_bias)
    block("head.roff.b0")
    block("head.roff.b1")
    zero_pw("head.roff.out", 2, d)
    return p


def _conv_block(x: Var, params: _P, base: str) -> Var:
    h = ad.depthwise_conv(x, params[f"{base}.dw.w"], params[f"{base}.dw.b"])
    h = ad.pointwise(h, params[f"{base}.pw.w"], params[f"{base}.pw.b"])
    h = ad.layer_norm(h, params[f"{base}.ln.g"], params[f"{base}.ln.b"])
    return ad.relu(h)


def channel_attention(f_a: Var, f_b: Var, params: _P, base: str) -> Var:
    """Per-channel gate in (0,1)^D from the summed features: (D, 1)."""
    if f_a.value.shape != f_b.value.shape:
        raise ValueError(f"attention inputs differ: {f_a.value.shape} vs {f_b.value.shape}")
    pooled = ad.global_avg_pool(ad.relu(ad.add(f_a, f_b)))
    return ad.sigmoid(ad.pointwise(pooled, params[f"{base}.att.w"], params[f"{base}.att.b"]))


def _fuse(p_l: Var, neighbour: Var, params: _P, base: str, fusion: str) -> Var:
    """Combine a level with its resampled neighbour per the fusion strategy."""
    t = p_l.value.shape[1]
    if fusion == "attention":
        f_l = ad.depthwise_conv(p_l, params[f"{base}.refine.w"], params[f"{base}.refine.b"])
        w = channel_attention(f_l, neighbour, params, base)
        return ad.add(p_l, ad.mul(neighbour, ad.expand_time(w, t)))
    if fusion == "add":
        return ad.add(p_l, neighbour)
    return ad.pointwise(ad.concat_rows([p_l, neighbour]),
                        params[f"{base}.cat.w"], params[f"{base}.cat.b"])


def classification_fuse(p_l: Var, p_hi: Var, params: _P,
                        fusion: str = "attention") -> Var:
    """Fold the coarser neighbour (level l+1) into level l for classification."""
    t = p_l.value.shape[1]
    if p_hi.value.shape[1] != (t + 1) // 2:
        raise ValueError(
            f"classification_fuse: neighbour length {p_hi.value.shape[1]}, expected {(t + 1) // 2}")
    up = ad.upsample_conv(p_hi, params["head.dcm.up.w"], params["head.dcm.up.b"])
    return _fuse(p_l, ad.trim_time(up, t), params, "head.dcm", fusion)


def regression_fuse(p_l: Var, p_lo: Var, params: _P,
                    fusion: str = "attention") -> Var:
    """Fold the finer neighbour (level l-1) into level l for boundary regression."""
    t = p_l.value.shape[1]
    if (p_lo.value.shape[1] + 1) // 2 != t:
        raise ValueError(
            f"regression_fuse: neighbour length {p_lo.value.shape[1]} does not halve to {t}")
    down = ad.downsample_conv(p_lo, params["head.drm.down.w"], params["head.drm.down.b"])
    return _fuse(p_l, down, params, "head.drm", fusion)


def neighbour_fuse(p_lo: Var, p_l: Var, p_hi: Var, params: _P) -> Var:
    """Sum of level l with both resampled neighbours, for refinement."""
    t = p_l.value.shape[1]
    down = ad.downsample_conv(p_lo, params["head.fuse.down.w"], params["head.fuse.down.b"])
    up = ad.upsample_conv(p_hi, params["head.fuse.up.w"], params["head.fuse.up.b"])
    if down.value.shape[1] != t:
        raise ValueError(f"neighbour_fuse: lower level halves to {down.value.shape[1]}, not {t}")
    return ad.add(ad.add(down, p_l), ad.trim_time(up, t))


def classify(f_cls: Var, params: _P, classes: int) -> Var:
    """Per-class probabilities (C, T) through the 3-conv classification head."""
    h = _conv_block(f_cls, params, "head.cls.b0")
    h = _conv_block(h, params, "head.cls.b1")
    out = ad.pointwise(h, params["head.cls.out.w"], params["head.cls.out.b"])
    if out.value.shape[0] != classes:
        raise ValueError(f"classification head emits {out.value.shape[0]} channels, expected {classes}")
    return ad.sigmoid(out)


def boundary_regress(f_reg: Var, params: _P, bins: int) -> tuple[Var, Var]:
    """Coarse start / end positions (1, T) in grid units.

    Offsets are expectations over distance bins b in [0, B]: the start
    logit at instant t-b plus a per-instant bin logit, softmaxed over b.
    Out-of-sequence bins carry a large negative mask.
    """
    t = f_reg.value.shape[1]
    s_logit = ad.pointwise(_conv_block(f_reg, params, "head.reg.start"),
                           params["head.reg.start.out.w"], params["head.reg.start.out.b"])
    e_logit = ad.pointwise(_conv_block(f_reg, params, "head.reg.end"),
                           params["head.reg.end.out.w"], params["head.reg.end.out.b"])
    center = ad.pointwise(_conv_block(f_reg, params, "head.reg.center"),
                          params["head.reg.center.out.w"], params["head.reg.center.out.b"])
    m_start = ad.slice_rows(center, 0, bins + 1)
    m_end = ad.slice_rows(center, bins + 1, 2 * (bins + 1))

    bin_values = ad.const(np.tile(np.arange(bins + 1, dtype=np.float64)[:, None], (1, t)))
    p_start = ad.softmax(ad.add(ad.band_stack_past(s_logit, bins), m_start), axis=0)
    p_end = ad.softmax(ad.add(ad.band_stack_future(e_logit, bins), m_end), axis=0)
    d_start = ad.sum_axis(ad.mul(p_start, bin_values), axis=0)
    d_end = ad.sum_axis(ad.mul(p_end, bin_values), axis=0)

    idx = ad.const(np.arange(t, dtype=np.float64)[None, :])
    return ad.sub(idx, d_start), ad.add(idx, d_end)


def refine_outputs(coarse: LevelOutputs, r_co: Var, r_so: Var, r_eo: Var,
                   refine_cls: bool, refine_reg: bool) -> LevelOutputs:
    """Apply refinement maps: geometric-mean class adjust, additive offsets."""
    cls_ref = ad.sqrt(ad.mul(coarse.cls_coarse, r_co)) if refine_cls else coarse.cls_coarse
    start_ref = ad.add(coarse.start_coarse, r_so) if refine_reg else coarse.start_coarse
    end_ref = ad.add(coarse.end_coarse, r_eo) if refine_reg else coarse.end_coarse
    return LevelOutputs(coarse.cls_coarse, coarse.start_coarse, coarse.end_coarse,
                        cls_ref, start_ref, end_ref)


def refine(coarse: LevelOutputs, f_c: Var, params: _P, cfg: DecoderConfig) -> LevelOutputs:
    h = _conv_block(f_c, params, "head.radj.b0")
    h = _conv_block(h, params, "head.radj.b1")
    r_co = ad.sigmoid(ad.pointwise(h, params["head.radj.out.w"], params["head.radj.out.b"]))
    h = _conv_block(f_c, params, "head.roff.b0")
    h = _conv_block(h, params, "head.roff.b1")
    offsets = ad.pointwise(h, params["head.roff.out.w"], params["head.roff.out.b"])
    r_so = ad.slice_rows(offsets, 0, 1)
    r_eo = ad.slice_rows(offsets, 1, 2)
    return refine_outputs(coarse, r_co, r_so, r_eo, cfg.refine_cls, cfg.refine_reg)


def _plain_level(p_l: Var, params: _P, cfg: DecoderConfig) -> LevelOutputs:
    cls = classify(p_l, params, cfg.classes)
    start, end = boundary_regress(p_l, params, cfg.bins)
    return LevelOutputs(cls, start, end, cls, start, end)


def decode_pyramid(pyramid: FeaturePyramid, params: _P,
                   cfg: DecoderConfig) -> list[LevelOutputs]:
    """Run the shared heads over every level.

    Intermediate levels (2..L-1) use cross-layer fusion and refinement;
    the boundary levels predict directly from their own features and
    reuse the coarse outputs as the refined ones.
    """
    levels = pyramid.levels
    out: list[LevelOutputs] = []
    for i, p_l in enumerate(levels):
        lvl = i + 1
        if not cfg.decouple or lvl == 1 or lvl == len(levels):
            out.append(_plain_level(p_l, params, cfg))
            continue
        f_cls = classification_fuse(p_l, levels[i + 1], params, cfg.fusion)
        f_reg = regression_fuse(p_l, levels[i - 1], params, cfg.fusion)
        cls = classify(f_cls, params, cfg.classes)
        start, end = boundary_regress(f_reg, params, cfg.bins)
        coarse = LevelOutputs(cls, start, end, cls, start, end)
        if not (cfg.refine_cls or cfg.refine_reg):
            out.append(coarse)
            continue
        f_c = neighbour_fuse(levels[i - 1], p_l, levels[i + 1], params)
        out.append(refine(coarse, f_c, params, cfg))
    return out
