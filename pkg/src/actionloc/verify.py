"""Self-verification suites behind the `gradcheck` and `selftest` commands.

`gradcheck` measures analytic-vs-central-difference gradient error for
every engine op and for composed encoder/decoder/loss graphs.
`selftest` runs the independent brute-force oracles: direct DFT laws,
spectrum filtering as circular convolution, Soft-NMS and AP bit-equality,
assignment enumeration, and the frozen hand values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import oracles
from .decoder import DecoderConfig, decode_pyramid
from .detect import ScoredSegment, soft_nms
from .encoder import EncoderConfig, _P, encode, init_encoder_params, spectrum_filter
from .evaluate import average_precision, match
from .losses import quality_targets, tiou, total_loss, varifocal_scalar
from .model import ModelConfig, init_params
from .targets import assign_targets, level_ranges

OP_TOLERANCE = 1e-4
COMPOSED_TOLERANCE = 1e-3


def _weighted(node: ad.Var, direction: np.ndarray) -> ad.Var:
    return ad.sum_all(ad.mul(node, ad.const(direction)))


def _op_cases(rng: np.random.Generator):
    """op name -> (builder, binding shapes, positive-only inputs)."""
    d, t = 3, 8
    dirs: dict[tuple, np.ndarray] = {}

    def w(node):
        key = node.value.shape
        if key not in dirs:
            dirs[key] = rng.normal(size=key)
        return _weighted(node, dirs[key])

    two = {"x": (d, t), "y": (d, t)}
    one = {"x": (d, t)}
    conv = {"x": (d, t), "k": (d, 3), "b": (d, 1)}
    cases = {
        "add": (lambda v: w(ad.add(v["x"], v["y"])), two, False),
        "sub": (lambda v: w(ad.sub(v["x"], v["y"])), two, False),
        "mul": (lambda v: w(ad.mul(v["x"], v["y"])), two, False),
        "div": (lambda v: w(ad.div(v["x"], ad.add(ad.mul(v["y"], v["y"]),
                                                  ad.const(np.ones((d, t)))))), two, False),
        "minimum": (lambda v: w(ad.minimum(v["x"], v["y"])), two, False),
        "maximum": (lambda v: w(ad.maximum(v["x"], v["y"])), two, False),
        "affine": (lambda v: w(ad.affine(v["x"], 1.3, -0.2)), one, False),
        "relu": (lambda v: w(ad.relu(v["x"])), one, False),
        "sigmoid": (lambda v: w(ad.sigmoid(v["x"])), one, False),
        "log": (lambda v: w(ad.log(v["x"])), one, True),
        "sqrt": (lambda v: w(ad.sqrt(v["x"])), one, True),
        "softmax": (lambda v: w(ad.softmax(v["x"], axis=0)), one, False),
        "pointwise": (lambda v: w(ad.pointwise(v["x"], v["k"], v["b"])),
                      {"x": (d, t), "k": (4, d), "b": (4, 1)}, False),
        "depthwise_conv": (lambda v: w(ad.depthwise_conv(v["x"], v["k"], v["b"])),
                           conv, False),
        "downsample_conv": (lambda v: w(ad.downsample_conv(v["x"], v["k"], v["b"])),
                            conv, False),
        "upsample_conv": (lambda v: w(ad.upsample_conv(v["x"], v["k"], v["b"])),
                          conv, False),
        "max_pool2": (lambda v: w(ad.max_pool2(v["x"])), {"x": (d, 7)}, False),
        "global_avg_pool": (lambda v: w(ad.global_avg_pool(v["x"])), one, False),
        "expand_time": (lambda v: w(ad.expand_time(v["x"], t)), {"x": (d, 1)}, False),
        "sum_axis": (lambda v: w(ad.sum_axis(v["x"], 1)), one, False),
        "layer_norm": (lambda v: w(ad.layer_norm(v["x"], v["g"], v["b"])),
                       {"x": (d, t), "g": (d, 1), "b": (d, 1)}, False),
        "group_norm": (lambda v: w(ad.group_norm(v["x"], v["g"], v["b"], 2)),
                       {"x": (4, t), "g": (4, 1), "b": (4, 1)}, False),
        "slice_rows": (lambda v: w(ad.slice_rows(v["x"], 1, 3)), {"x": (4, t)}, False),
        "concat_rows": (lambda v: w(ad.concat_rows([v["x"], v["y"]])),
                        {"x": (d, t), "y": (2, t)}, False),
        "trim_time": (lambda v: w(ad.trim_time(v["x"], 5)), one, False),
        "band_stack_past": (lambda v: w(ad.softmax(ad.band_stack_past(v["x"], 3), 0)),
                            {"x": (1, t)}, False),
        "band_stack_future": (lambda v: w(ad.softmax(ad.band_stack_future(v["x"], 3), 0)),
                              {"x": (1, t)}, False),
        "dft": (lambda v: w(ad.dft(v["x"])), one, False),
        "idft_real": (lambda v: w(ad.idft_real(v["x"])), {"x": (2 * d, t)}, False),
        "complex_hadamard": (lambda v: w(ad.complex_hadamard(v["x"], v["y"])),
                             {"x": (2 * d, t), "y": (2 * d, t)}, False),
    }
    return cases


def op_gradient_report(points: int = 10, seed: int = 0) -> dict[str, float]:
    """Max relative fd error per engine op over `points` random draws."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, (builder, shapes, positive) in _op_cases(rng).items():
        worst = 0.0
        for _ in range(points):
            bindings = {}
            for k, s in shapes.items():
                mag = rng.uniform(0.15, 1.2, size=s)
                bindings[k] = mag if positive else mag * rng.choice([-1.0, 1.0], size=s)
            for wrt in bindings:
                worst = max(worst, ad.fd_check(builder, bindings, wrt))
        report[name] = worst
    return report


def wake_prediction_layers(params: dict[str, np.ndarray],
                           rng: np.random.Generator, scale: float = 0.3) -> None:
    """Randomise the zero-initialised prediction and gate layers in place.

    Fresh parameters leave every output constant (flat scores, centred
    bins), which would make composed gradient checks vacuous.
    """
    for name in params:
        if name.endswith(".out.w") or name.endswith(".att.w"):
            params[name] = rng.normal(0.0, scale / np.sqrt(params[name].shape[1]),
                                      params[name].shape)
        elif name.endswith(".ffn2.w"):
            params[name] = rng.normal(0.0, scale / np.sqrt(params[name].shape[1]),
                                      params[name].shape)


def composed_gradient_report(points: int = 10, seed: int = 0) -> dict[str, float]:
    """fd error through the full encoder, decoder, and training loss."""
    cfg = ModelConfig(EncoderConfig(input_dim=4, dim=8, levels=3, groups=2,
                                    ffn_expansion=2),
                      DecoderConfig(classes=3, bins=4))
    rng = np.random.default_rng(seed)
    report = {"encoder": 0.0, "decoder": 0.0, "loss": 0.0}
    for point in range(points):
        params = init_params(cfg, seed=int(rng.integers(1 << 30)))
        wake_prediction_layers(params, rng)
        feats = rng.normal(size=(4, 32))
        actions = [(float(rng.uniform(4, 10)) + 0.37,
                    float(rng.uniform(16, 28)) + 0.21, int(rng.integers(1, 4)))]
        enc_dir: list[np.ndarray] = []
        out_dir: dict = {}
        frozen_q: list[np.ndarray] = []

        def run(lv, want):
            view = _P(dict(params))
            view._nodes["enc.proj0.pw.w"] = lv["w"]
            pyr = encode(ad.const(feats), view, cfg.encoder)
            if want == "encoder":
                if not enc_dir:
                    enc_dir.extend(rng.normal(size=l.value.shape) for l in pyr.levels)
                total = None
                for node, d in zip(pyr.levels, enc_dir):
                    s = _weighted(node, d)
                    total = s if total is None else ad.add(total, s)
                return total
            outs = decode_pyramid(pyr, view, cfg.decoder)
            if want == "decoder":
                total = None
                for i, o in enumerate(outs):
                    for f in ("cls_refined", "start_refined", "end_refined"):
                        node = getattr(o, f)
                        if (i, f) not in out_dir:
                            out_dir[(i, f)] = rng.normal(size=node.value.shape)
                        s = _weighted(node, out_dir[(i, f)])
                        total = s if total is None else ad.add(total, s)
                return total
            assign = assign_targets(actions, [l.value.shape[1] for l in pyr.levels],
                                    pyr.strides)
            if not frozen_q:
                frozen_q.extend(quality_targets(outs, assign))
            return total_loss(outs, assign, quality=frozen_q).total

        base = {"w": params["enc.proj0.pw.w"].copy()}
        for target in report:
            enc_dir.clear()
            out_dir.clear()
            frozen_q.clear()
            err = ad.fd_check(lambda lv, t=target: run(lv, t), base, "w")
            report[target] = max(report[target], err)
    return report


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _spectral_suite(rng) -> SuiteResult:
    worst = 0.0
    cfg = EncoderConfig(input_dim=4, dim=4, levels=2, groups=2)
    for t in (7, 8, 33, 64):
        for _ in range(13):
            params = init_encoder_params(cfg, np.random.default_rng(rng.integers(1 << 30)))
            view = _P(params)
            x = rng.normal(size=(4, t))
            out = spectrum_filter(ad.const(x), view, "enc.l1.b0")
            spec = ad.dft(ad.const(x))
            w = ad.depthwise_conv(spec, view["enc.l1.b0.gf1.w"], view["enc.l1.b0.gf1.b"])
            w = ad.depthwise_conv(ad.relu(w), view["enc.l1.b0.gf2.w"], view["enc.l1.b0.gf2.b"])
            mask = w.value[:4] + 1j * w.value[4:]
            kernel = oracles.idft_direct(mask).real
            want = oracles.circular_conv(x, kernel)
            worst = max(worst, float(np.abs(out.value - want).max()
                                     / max(1.0, np.abs(want).max())))
    return SuiteResult("spectrum filter == circular convolution (52 pairs)",
                       worst < 1e-8, f"max relative error {worst:.2e}")


def _dft_suite(rng) -> SuiteResult:
    worst_round = 0.0
    worst_parseval = 0.0
    for t in range(1, 65):
        x = rng.normal(size=(2, t))
        back = ad.idft_real(ad.dft(ad.leaf(x))).value
        worst_round = max(worst_round,
                          float(np.abs(back - x).max() / max(1.0, np.abs(x).max())))
        spec = ad.dft(ad.leaf(x)).value
        worst_parseval = max(worst_parseval, float(
            abs((x ** 2).sum() - (spec ** 2).sum() / t) / (x ** 2).sum()))
    ok = worst_round < 1e-9 and worst_parseval < 1e-8
    return SuiteResult("DFT roundtrip & Parseval, T=1..64", ok,
                       f"roundtrip {worst_round:.2e}, parseval {worst_parseval:.2e}")


def _soft_nms_suite(rng, instances: int = 1000) -> SuiteResult:
    for i in range(instances):
        n = int(rng.integers(0, 65))
        cands = []
        for _ in range(n):
            s = float(rng.uniform(0, 20))
            cands.append(ScoredSegment(s, s + float(rng.uniform(0.5, 8)),
                                       int(rng.integers(1, 4)),
                                       float(rng.uniform(0.01, 1.0))))
        sigma = float(rng.uniform(0.2, 1.0))
        floor = float(rng.choice([0.0, 0.001, 0.05]))
        got = soft_nms(cands, sigma, floor)
        ref = oracles.soft_nms_reference(
            [(c.start_s, c.end_s, c.label, c.score, c.tie_key()) for c in cands],
            sigma, floor, lambda a, b, c_, d_: tiou((a, b), (c_, d_)))
        if len(got) != len(ref) or any(
                (g.start_s, g.end_s, g.label, g.score) != (r[0], r[1], r[2], r[3])
                for g, r in zip(got, ref)):
            return SuiteResult("Soft-NMS bit-equality (1000 instances)", False,
                               f"diverged on instance {i}")
    hand = soft_nms([ScoredSegment(1.0, 3.0, 1, 0.9), ScoredSegment(1.0, 3.0, 1, 0.8)],
                    0.5, 0.001)
    ok = abs(hand[1].score - 0.8 * math.exp(-2.0)) < 1e-9
    return SuiteResult("Soft-NMS bit-equality (1000 instances)", ok,
                       f"decay hand value {hand[1].score:.6f}")


def _ap_suite(rng, instances: int = 1000) -> SuiteResult:
    def t4(a, b, c, d):
        return tiou((a, b), (c, d))

    for i in range(instances):
        n_pred = int(rng.integers(0, 9))
        n_gt = int(rng.integers(1, 5))
        preds = []
        for _ in range(n_pred):
            s = float(rng.uniform(0, 10))
            preds.append((s, s + float(rng.uniform(0.5, 5))))
        gts = []
        for _ in range(n_gt):
            s = float(rng.uniform(0, 10))
            gts.append((s, s + float(rng.uniform(0.5, 5))))
        tau = float(rng.choice([0.3, 0.5, 0.7]))
        flags = match(preds, gts, tau)
        ref = oracles.match_reference(preds, gts, tau, t4)
        if flags != ref or average_precision(flags, n_gt) != \
                oracles.average_precision_reference(ref, n_gt):
            return SuiteResult("matching/AP bit-equality (1000 instances)", False,
                               f"diverged on instance {i}")
    ok = average_precision([False, True], 1) == 0.5
    return SuiteResult("matching/AP bit-equality (1000 instances)", ok,
                       "hand value AP(FP,TP; 1 gt) = 0.5")


def _assignment_suite(rng, instances: int = 50) -> SuiteResult:
    for i in range(instances):
        t = int(rng.integers(32, 128))
        levels = int(rng.integers(2, 6))
        lens = [t]
        for _ in range(levels - 1):
            lens.append((lens[-1] + 1) // 2)
        strides = [2 ** k for k in range(levels)]
        actions = []
        for _ in range(int(rng.integers(0, 4))):
            length = float(rng.uniform(2, t / 2))
            s = float(rng.uniform(0, t - length))
            actions.append((s, s + length, int(rng.integers(1, 4))))
        got = assign_targets(actions, lens, strides)
        ref = oracles.assignment_reference(actions, lens, strides, 1.5,
                                           level_ranges(levels))
        for lvl, want in zip(got.levels, ref):
            have = {int(j): (int(lvl.labels[j]), float(lvl.starts[j]), float(lvl.ends[j]))
                    for j in np.flatnonzero(lvl.labels)}
            if set(have) != set(want) or any(
                    have[j][0] != want[j][0]
                    or abs(have[j][1] - want[j][1]) > 1e-12
                    or abs(have[j][2] - want[j][2]) > 1e-12 for j in want):
                return SuiteResult("assignment enumeration oracle (50 instances)",
                                   False, f"diverged on instance {i}")
    return SuiteResult("assignment enumeration oracle (50 instances)", True, "exact")


def _hand_values_suite(rng) -> SuiteResult:
    checks = [
        ("varifocal(0.5, 0)", varifocal_scalar(0.5, 0.0), 0.75 * 0.25 * math.log(2.0)),
        ("tiou([2,6],[4,8])", tiou((2, 6), (4, 8)), 1 / 3),
        ("decay 0.8*e^-2", 0.8 * math.exp(-2.0), 0.10826822658929017),
    ]
    bad = [f"{n}: {got} != {want}" for n, got, want in checks
           if abs(got - want) > 1e-9]
    return SuiteResult("frozen hand values", not bad, "; ".join(bad) or "all exact")


def oracle_report(seed: int = 0) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    return [
        _dft_suite(rng),
        _spectral_suite(rng),
        _soft_nms_suite(rng),
        _ap_suite(rng),
        _assignment_suite(rng),
        _hand_values_suite(rng),
    ]
