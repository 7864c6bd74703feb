"""Decoder tests: attention gate, cross-layer fusion identities, binned
boundary head, refinement algebra, full decode shape and sharing laws."""

import numpy as np
import pytest

from actionloc import autodiff as ad
from actionloc import checkpoint
from actionloc.decoder import (DecoderConfig, LevelOutputs, boundary_regress,
                               channel_attention, classification_fuse,
                               classify, decode_pyramid, init_head_params,
                               neighbour_fuse, refine_outputs, regression_fuse)
from actionloc.encoder import EncoderConfig, FeaturePyramid, _P
from actionloc.model import ModelConfig, init_params


D = 8


def head_params(classes=3, bins=4, fusion="attention", seed=0):
    cfg = DecoderConfig(classes=classes, bins=bins, fusion=fusion)
    return init_head_params(D, cfg, np.random.default_rng(seed)), cfg


def rand_pyramid(lengths, seed=1):
    rng = np.random.default_rng(seed)
    levels = [ad.const(rng.normal(size=(D, t))) for t in lengths]
    return FeaturePyramid(levels=levels, strides=[2 ** i for i in range(len(lengths))])


def zero_cross_layer(params):
    for name in list(params):
        if any(tag in name for tag in ("head.dcm.", "head.drm.", "head.fuse.")):
            params[name] = np.zeros_like(params[name])
    return params


class TestChannelAttention:
    def test_cancelling_inputs_and_zero_fc_give_half(self):
        params, _ = head_params()
        x = np.random.default_rng(2).normal(size=(D, 6))
        w = channel_attention(ad.const(x), ad.const(-x), _P(params), "head.dcm")
        np.testing.assert_array_equal(w.value, np.full((D, 1), 0.5))

    def test_large_bias_saturates_to_one(self):
        params, _ = head_params()
        params["head.dcm.att.b"] = np.full((D, 1), 1e3)
        w = channel_attention(ad.const(np.zeros((D, 4))), ad.const(np.zeros((D, 4))),
                              _P(params), "head.dcm")
        np.testing.assert_array_equal(w.value, np.ones((D, 1)))

    def test_random_inputs_strictly_inside_unit_interval(self):
        params, _ = head_params(seed=3)
        params["head.dcm.att.w"] = np.random.default_rng(4).normal(size=(D, D))
        rng = np.random.default_rng(5)
        w = channel_attention(ad.const(rng.normal(size=(D, 10))),
                              ad.const(rng.normal(size=(D, 10))), _P(params), "head.dcm")
        assert (w.value > 0).all() and (w.value < 1).all()

    def test_shape_mismatch_rejected(self):
        params, _ = head_params()
        with pytest.raises(ValueError, match="attention"):
            channel_attention(ad.const(np.zeros((D, 4))), ad.const(np.zeros((D, 5))),
                              _P(params), "head.dcm")


class TestClassificationFuse:
    def test_zero_upconv_passes_level_through(self):
        params, cfg = head_params()
        params["head.dcm.up.w"] = np.zeros((D, 3))
        p_l = np.random.default_rng(1).normal(size=(D, 10))
        p_hi = np.random.default_rng(2).normal(size=(D, 5))
        out = classification_fuse(ad.const(p_l), ad.const(p_hi), _P(params))
        np.testing.assert_array_equal(out.value, p_l)

    def test_unit_gate_adds_upsampled_neighbour(self):
        params, cfg = head_params()
        params["head.dcm.att.b"] = np.full((D, 1), 1e3)  # gate == 1 exactly
        view = _P(params)
        p_l = np.random.default_rng(1).normal(size=(D, 10))
        p_hi = np.random.default_rng(2).normal(size=(D, 5))
        out = classification_fuse(ad.const(p_l), ad.const(p_hi), view)
        up = ad.trim_time(ad.upsample_conv(ad.const(p_hi), view["head.dcm.up.w"],
                                           view["head.dcm.up.b"]), 10)
        np.testing.assert_allclose(out.value, p_l + up.value, atol=1e-12)

    def test_length_mismatch_rejected(self):
        params, _ = head_params()
        with pytest.raises(ValueError, match="neighbour length"):
            classification_fuse(ad.const(np.zeros((D, 10))), ad.const(np.zeros((D, 4))),
                                _P(params))

    def test_odd_length_alignment(self):
        params, _ = head_params()
        out = classification_fuse(ad.const(np.zeros((D, 9))), ad.const(np.zeros((D, 5))),
                                  _P(params))
        assert out.value.shape == (D, 9)

    def test_gradient(self):
        params, _ = head_params()
        p_hi0 = np.random.default_rng(3).normal(size=(D, 5))
        direction = np.random.default_rng(4).normal(size=(D, 10))

        def build(lv):
            out = classification_fuse(lv["p_l"], ad.const(p_hi0), _P(params))
            return ad.sum_all(ad.mul(out, ad.const(direction)))

        err = ad.fd_check(build, {"p_l": np.random.default_rng(5).normal(size=(D, 10))}, "p_l")
        assert err < 1e-4


class TestRegressionFuse:
    def test_zero_downconv_passes_level_through(self):
        params, _ = head_params()
        params["head.drm.down.w"] = np.zeros((D, 3))
        p_l = np.random.default_rng(1).normal(size=(D, 8))
        out = regression_fuse(ad.const(p_l), ad.const(np.random.default_rng(2).normal(size=(D, 16))),
                              _P(params))
        np.testing.assert_array_equal(out.value, p_l)

    def test_unit_gate_adds_downsampled_neighbour(self):
        params, _ = head_params()
        params["head.drm.att.b"] = np.full((D, 1), 1e3)
        view = _P(params)
        p_l = np.random.default_rng(1).normal(size=(D, 8))
        p_lo = np.random.default_rng(2).normal(size=(D, 15))
        out = regression_fuse(ad.const(p_l), ad.const(p_lo), view)
        down = ad.downsample_conv(ad.const(p_lo), view["head.drm.down.w"],
                                  view["head.drm.down.b"])
        np.testing.assert_allclose(out.value, p_l + down.value, atol=1e-12)

    def test_length_mismatch_rejected(self):
        params, _ = head_params()
        with pytest.raises(ValueError, match="halve"):
            regression_fuse(ad.const(np.zeros((D, 8))), ad.const(np.zeros((D, 20))),
                            _P(params))


class TestClassify:
    def test_zero_final_conv_gives_half(self):
        params, cfg = head_params()
        params["head.cls.out.w"] = np.zeros_like(params["head.cls.out.w"])
        params["head.cls.out.b"] = np.zeros_like(params["head.cls.out.b"])
        out = classify(ad.const(np.random.default_rng(1).normal(size=(D, 12))),
                       _P(params), cfg.classes)
        np.testing.assert_array_equal(out.value, np.full((3, 12), 0.5))

    def test_outputs_in_unit_interval(self):
        params, cfg = head_params(seed=7)
        out = classify(ad.const(np.random.default_rng(2).normal(size=(D, 12)) * 3),
                       _P(params), cfg.classes)
        assert (out.value > 0).all() and (out.value < 1).all()

    def test_gradient(self):
        params, cfg = head_params()
        direction = np.random.default_rng(3).normal(size=(3, 6))

        def build(lv):
            out = classify(lv["x"], _P(params), cfg.classes)
            return ad.sum_all(ad.mul(out, ad.const(direction)))

        err = ad.fd_check(build, {"x": np.random.default_rng(4).normal(size=(D, 6))}, "x")
        assert err < 1e-4


class TestBoundaryHead:
    def test_uniform_logits_centre_offsets(self):
        params, _ = head_params(bins=16)
        t = 48
        start, end = boundary_regress(ad.const(np.random.default_rng(1).normal(size=(D, t))),
                                      _P(params), 16)
        # interior instants see all 17 bins; zero-init heads mean uniform bins
        np.testing.assert_allclose(start.value[0, 16:], np.arange(16, t) - 8.0, atol=1e-12)
        np.testing.assert_allclose(end.value[0, :t - 16], np.arange(t - 16) + 8.0, atol=1e-12)

    def test_forced_first_bin_pins_boundaries_to_instant(self):
        params, _ = head_params(bins=4)
        params["head.reg.center.out.b"][0, 0] = 1e4   # start bin 0
        params["head.reg.center.out.b"][5, 0] = 1e4   # end bin 0
        t = 10
        start, end = boundary_regress(ad.const(np.random.default_rng(1).normal(size=(D, t))),
                                      _P(params), 4)
        np.testing.assert_array_equal(start.value[0], np.arange(t, dtype=float))
        np.testing.assert_array_equal(end.value[0], np.arange(t, dtype=float))

    def test_offsets_bounded_by_bins(self):
        params, _ = head_params(bins=4, seed=9)
        for name in ("start", "end", "center"):
            params[f"head.reg.{name}.out.w"] = \
                np.random.default_rng(10).normal(size=params[f"head.reg.{name}.out.w"].shape)
        t = 20
        idx = np.arange(t)
        start, end = boundary_regress(ad.const(np.random.default_rng(2).normal(size=(D, t))),
                                      _P(params), 4)
        d_start = idx - start.value[0]
        d_end = end.value[0] - idx
        assert (d_start >= 0).all() and (d_start <= 4).all()
        assert (d_end >= 0).all() and (d_end <= 4).all()

    def test_gradient(self):
        params, _ = head_params(bins=4)
        for name in ("start", "end", "center"):
            params[f"head.reg.{name}.out.w"] = \
                0.3 * np.random.default_rng(11).normal(size=params[f"head.reg.{name}.out.w"].shape)
        ds = np.random.default_rng(3).normal(size=(1, 8))
        de = np.random.default_rng(4).normal(size=(1, 8))

        def build(lv):
            start, end = boundary_regress(lv["x"], _P(params), 4)
            return ad.add(ad.sum_all(ad.mul(start, ad.const(ds))),
                          ad.sum_all(ad.mul(end, ad.const(de))))

        err = ad.fd_check(build, {"x": np.random.default_rng(5).normal(size=(D, 8))}, "x")
        assert err < 1e-4


class TestNeighbourFuse:
    def test_zero_convs_pass_level_through(self):
        params, _ = head_params()
        for k in ("head.fuse.down.w", "head.fuse.up.w"):
            params[k] = np.zeros((D, 3))
        p_l = np.random.default_rng(1).normal(size=(D, 8))
        out = neighbour_fuse(ad.const(np.random.default_rng(2).normal(size=(D, 16))),
                             ad.const(p_l),
                             ad.const(np.random.default_rng(3).normal(size=(D, 4))),
                             _P(params))
        np.testing.assert_array_equal(out.value, p_l)

    def test_all_zero_inputs_give_zero(self):
        params, _ = head_params()
        out = neighbour_fuse(ad.const(np.zeros((D, 16))), ad.const(np.zeros((D, 8))),
                             ad.const(np.zeros((D, 4))), _P(params))
        np.testing.assert_array_equal(out.value, np.zeros((D, 8)))

    def test_shape(self):
        params, _ = head_params()
        out = neighbour_fuse(ad.const(np.random.default_rng(1).normal(size=(D, 15))),
                             ad.const(np.random.default_rng(2).normal(size=(D, 8))),
                             ad.const(np.random.default_rng(3).normal(size=(D, 4))),
                             _P(params))
        assert out.value.shape == (D, 8)


def coarse_outputs(c, t, seed):
    rng = np.random.default_rng(seed)
    cls = ad.const(rng.uniform(0.05, 0.95, size=(c, t)))
    start = ad.const(rng.normal(size=(1, t)))
    end = ad.const(rng.normal(size=(1, t)))
    return LevelOutputs(cls, start, end, cls, start, end)


class TestRefinement:
    def test_matching_adjustment_is_identity(self):
        coarse = coarse_outputs(3, 8, 1)
        zeros = ad.const(np.zeros((1, 8)))
        out = refine_outputs(coarse, coarse.cls_coarse, zeros, zeros, True, True)
        np.testing.assert_allclose(out.cls_refined.value, coarse.cls_coarse.value, atol=1e-12)

    def test_zero_offsets_keep_boundaries(self):
        coarse = coarse_outputs(3, 8, 2)
        zeros = ad.const(np.zeros((1, 8)))
        out = refine_outputs(coarse, coarse.cls_coarse, zeros, zeros, True, True)
        np.testing.assert_array_equal(out.start_refined.value, coarse.start_coarse.value)
        np.testing.assert_array_equal(out.end_refined.value, coarse.end_coarse.value)

    def test_geometric_mean_value(self):
        coarse = coarse_outputs(1, 1, 3)
        coarse.cls_coarse.value[:] = 0.8
        r_co = ad.const(np.full((1, 1), 0.2))
        zeros = ad.const(np.zeros((1, 1)))
        out = refine_outputs(coarse, r_co, zeros, zeros, True, True)
        np.testing.assert_allclose(out.cls_refined.value, [[0.4]], atol=1e-12)

    def test_argmax_preserved_under_constant_adjustment(self):
        rng = np.random.default_rng(4)
        coarse = coarse_outputs(5, 12, 5)
        r_co = ad.const(np.tile(rng.uniform(0.1, 0.9, size=(1, 12)), (5, 1)))
        zeros = ad.const(np.zeros((1, 12)))
        out = refine_outputs(coarse, r_co, zeros, zeros, True, True)
        np.testing.assert_array_equal(out.cls_refined.value.argmax(axis=0),
                                      coarse.cls_coarse.value.argmax(axis=0))


class TestDecodePyramid:
    def test_level_counting(self):
        for n_levels, decoupled in ((3, 1), (6, 4)):
            params, cfg = head_params()
            pyr = rand_pyramid([32 // (2 ** i) for i in range(n_levels)])
            zero_cross_layer(params)
            # wake the refinement heads so decoupled levels are observable
            rng = np.random.default_rng(99)
            params["head.radj.out.w"] = rng.normal(size=params["head.radj.out.w"].shape)
            params["head.roff.out.w"] = rng.normal(size=params["head.roff.out.w"].shape)
            cfg_plain = DecoderConfig(classes=3, bins=4, decouple=False,
                                      refine_cls=False, refine_reg=False)
            out_full = decode_pyramid(pyr, _P(params), cfg)
            out_plain = decode_pyramid(pyr, _P(params), cfg_plain)
            differing = sum(
                1 for a, b in zip(out_full, out_plain)
                if not np.array_equal(a.cls_refined.value, b.cls_refined.value))
            # decoupled levels differ from plain only through refinement here
            assert differing == decoupled

    def test_output_lengths_match_pyramid(self):
        params, cfg = head_params()
        pyr = rand_pyramid([40, 20, 10, 5])
        outs = decode_pyramid(pyr, _P(params), cfg)
        assert [o.length for o in outs] == [40, 20, 10, 5]
        for o in outs:
            assert o.cls_coarse.value.shape[0] == 3

    def test_decoupling_identity(self):
        # zero cross-layer convs + refinement off == plain heads, bit for bit
        params, _ = head_params()
        zero_cross_layer(params)
        cfg_dec = DecoderConfig(classes=3, bins=4, refine_cls=False, refine_reg=False)
        cfg_plain = DecoderConfig(classes=3, bins=4, decouple=False,
                                  refine_cls=False, refine_reg=False)
        pyr = rand_pyramid([32, 16, 8, 4])
        a = decode_pyramid(pyr, _P(params), cfg_dec)
        b = decode_pyramid(pyr, _P(params), cfg_plain)
        for la, lb in zip(a, b):
            for field in ("cls_coarse", "start_coarse", "end_coarse",
                          "cls_refined", "start_refined", "end_refined"):
                np.testing.assert_array_equal(getattr(la, field).value,
                                              getattr(lb, field).value)

    def test_zero_offset_head_keeps_refined_boundaries(self):
        params, cfg = head_params(seed=13)
        # offset head final conv zeroed -> boundary refinement is the identity
        params["head.roff.out.w"] = np.zeros_like(params["head.roff.out.w"])
        params["head.roff.out.b"] = np.zeros_like(params["head.roff.out.b"])
        pyr = rand_pyramid([32, 16, 8])
        outs = decode_pyramid(pyr, _P(params), cfg)
        for o in outs:
            np.testing.assert_array_equal(o.start_refined.value, o.start_coarse.value)
            np.testing.assert_array_equal(o.end_refined.value, o.end_coarse.value)

    def test_head_parameters_identical_across_depths(self):
        import io, tempfile, os
        from actionloc.encoder import EncoderConfig
        cfg6 = ModelConfig(EncoderConfig(input_dim=4, dim=8, levels=6, groups=2),
                           DecoderConfig(classes=3, bins=4))
        cfg7 = ModelConfig(EncoderConfig(input_dim=4, dim=8, levels=7, groups=2),
                           DecoderConfig(classes=3, bins=4))
        p6 = init_params(cfg6, seed=42)
        p7 = init_params(cfg7, seed=42)
        heads6 = {k: v for k, v in p6.items() if k.startswith("head.")}
        heads7 = {k: v for k, v in p7.items() if k.startswith("head.")}
        with tempfile.TemporaryDirectory() as d:
            f6, f7 = os.path.join(d, "a"), os.path.join(d, "b")
            checkpoint.save_params(f6, heads6)
            checkpoint.save_params(f7, heads7)
            assert open(f6, "rb").read() == open(f7, "rb").read()

    def test_full_decoder_gradient(self):
        from actionloc.verify import wake_prediction_layers
        params, cfg = head_params()
        rng = np.random.default_rng(20)
        wake_prediction_layers(params, rng)  # zero-init heads have no gradient
        lengths = [32, 16, 8]
        arrays = {f"lvl{i}": rng.normal(size=(D, t)) for i, t in enumerate(lengths)}
        directions = {}

        def build(lv):
            pyr = FeaturePyramid(levels=[lv[f"lvl{i}"] for i in range(3)],
                                 strides=[1, 2, 4])
            outs = decode_pyramid(pyr, _P(params), cfg)
            total = None
            for i, o in enumerate(outs):
                for field in ("cls_refined", "start_refined", "end_refined"):
                    node = getattr(o, field)
                    key = (i, field)
                    if key not in directions:
                        directions[key] = np.random.default_rng(hash(key) % 2 ** 31).normal(
                            size=node.value.shape)
                    s = ad.sum_all(ad.mul(node, ad.const(directions[key])))
                    total = s if total is None else ad.add(total, s)
            return total

        assert ad.fd_check(build, arrays, "lvl1") < 1e-4
