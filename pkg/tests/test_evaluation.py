"""Matching / AP against the naive reference, plus mAP report behaviour."""

import numpy as np
import pytest

from actionloc import oracles
from actionloc.detect import ScoredSegment
from actionloc.evaluate import (EvalProtocol, average_precision, map_report,
                                match)
from actionloc.losses import tiou


def tiou4(s1, e1, s2, e2):
    return tiou((s1, e1), (s2, e2))


class TestMatch:
    def test_exact_hit_is_tp(self):
        assert match([(2.0, 5.0)], [(2.0, 5.0)], 0.5) == [True]

    def test_low_overlap_is_fp(self):
        # tiou 1/3 < threshold 0.5
        assert tiou((0.0, 4.0), (2.0, 6.0)) == pytest.approx(1 / 3)
        assert match([(0.0, 4.0)], [(2.0, 6.0)], 0.5) == [False]

    def test_single_match_rule(self):
        preds = [(2.0, 5.0), (2.1, 5.1)]  # ordered by descending score
        assert match(preds, [(2.0, 5.0)], 0.5) == [True, False]

    def test_prefers_highest_overlap_gt(self):
        preds = [(2.0, 6.0)]
        gts = [(0.0, 4.0), (2.5, 6.0)]
        flags = match(preds, gts, 0.3)
        assert flags == [True]
        # the second gt (higher overlap) was consumed
        assert match([(2.5, 6.0)], gts, 0.99) == [True]


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([True], 1) == 1.0

    def test_fp_then_tp_is_half(self):
        assert average_precision([False, True], 1) == 0.5
        assert oracles.average_precision_reference([False, True], 1) == 0.5

    def test_no_predictions_zero(self):
        assert average_precision([], 1) == 0.0

    def test_zero_gt_rejected(self):
        with pytest.raises(ValueError):
            average_precision([True], 0)

    def test_bit_identical_to_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(0, 9))
            num_gt = int(rng.integers(1, 5))
            flags = list(rng.uniform(size=n) < 0.5)
            got = average_precision(flags, num_gt)
            ref = oracles.average_precision_reference(flags, num_gt)
            assert got == ref


class TestMatchPlusApVsBruteForce:
    def test_random_instances_bit_identical(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n_pred = int(rng.integers(0, 9))
            n_gt = int(rng.integers(0, 5))
            preds = []
            for _ in range(n_pred):
                s = float(rng.uniform(0, 10))
                preds.append((s, s + float(rng.uniform(0.5, 5))))
            gts = []
            for _ in range(n_gt):
                s = float(rng.uniform(0, 10))
                gts.append((s, s + float(rng.uniform(0.5, 5))))
            tau = float(rng.choice([0.3, 0.5, 0.7]))
            got_flags = match(preds, gts, tau)
            ref_flags = oracles.match_reference(preds, gts, tau, tiou4)
            assert got_flags == ref_flags
            if n_gt > 0:
                assert average_precision(got_flags, n_gt) \
                    == oracles.average_precision_reference(ref_flags, n_gt)


def seg(s, e, label, score):
    return ScoredSegment(s, e, label, score)


class TestMapReport:
    def test_perfect_predictions(self):
        gts = {"v1": [(1.0, 3.0, 1), (5.0, 8.0, 2)]}
        dets = {"v1": [seg(1.0, 3.0, 1, 0.9), seg(5.0, 8.0, 2, 0.8)]}
        report = map_report(dets, gts, ["a", "b"], EvalProtocol())
        assert report.average_map == 1.0
        assert all(v == 1.0 for v in report.map_per_threshold)

    def test_empty_predictions(self):
        gts = {"v1": [(1.0, 3.0, 1)]}
        report = map_report({}, gts, ["a"], EvalProtocol())
        assert report.average_map == 0.0

    def test_class_without_gt_skipped(self):
        gts = {"v1": [(1.0, 3.0, 1)]}
        dets = {"v1": [seg(1.0, 3.0, 1, 0.9), seg(4.0, 5.0, 2, 0.99)]}
        report = map_report(dets, gts, ["a", "b"], EvalProtocol())
        assert "b" not in report.ap
        assert report.average_map == 1.0

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        gts = {f"v{i}": [(float(s), float(s + w), int(c))
                         for s, w, c in zip(rng.uniform(0, 50, 4),
                                            rng.uniform(1, 8, 4),
                                            rng.integers(1, 4, 4))]
               for i in range(5)}
        dets = {}
        for vid, items in gts.items():
            dets[vid] = []
            for s, e, c in items:
                jitter = rng.normal(0, 0.8)
                dets[vid].append(seg(s + jitter, e + jitter + rng.normal(0, 0.4),
                                     c, float(rng.uniform(0.2, 1.0))))
            dets[vid].append(seg(rng.uniform(0, 50), rng.uniform(51, 60), 1, 0.5))
        protocol = EvalProtocol(thresholds=(0.1, 0.3, 0.5, 0.7, 0.9))
        report = map_report(dets, gts, ["a", "b", "c"], protocol)
        assert 0.0 <= report.average_map <= 1.0
        diffs = np.diff(report.map_per_threshold)
        assert (diffs <= 1e-12).all()

    def test_matches_exhaustive_oracle_on_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            classes = ["c1", "c2", "c3"]
            gts = {}
            dets = {}
            for v in range(5):
                vid = f"v{v}"
                gts[vid] = []
                dets[vid] = []
                for _ in range(int(rng.integers(0, 4))):
                    s = float(rng.uniform(0, 20))
                    gts[vid].append((s, s + float(rng.uniform(1, 6)), int(rng.integers(1, 4))))
                for _ in range(int(rng.integers(0, 6))):
                    s = float(rng.uniform(0, 20))
                    dets[vid].append(seg(s, s + float(rng.uniform(1, 6)),
                                         int(rng.integers(1, 4)), float(rng.uniform())))
            protocol = EvalProtocol(thresholds=(0.3, 0.5, 0.7))
            report = map_report(dets, gts, classes, protocol)

            # oracle: per class, merge predictions in score order, match per
            # video with the naive reference, AP with the naive reference
            for ti, tau in enumerate(protocol.thresholds):
                aps = []
                for label, name in enumerate(classes, start=1):
                    num_gt = sum(1 for g in gts.values() for x in g if x[2] == label)
                    if num_gt == 0:
                        assert name not in report.ap
                        continue
                    pool = [(vid, d) for vid, ds in dets.items()
                            for d in ds if d.label == label]
                    pool.sort(key=lambda vd: (-vd[1].score, vd[1].start_s, vd[0],
                                              vd[1].end_s))
                    remaining = {vid: [(x[0], x[1]) for x in g if x[2] == label]
                                 for vid, g in gts.items()}
                    flags = []
                    for vid, d in pool:
                        fl = oracles.match_reference([(d.start_s, d.end_s)],
                                                     remaining.get(vid, []), tau, tiou4)
                        if fl[0]:
                            best, best_ov = -1, 0.0
                            for j, g in enumerate(remaining[vid]):
                                ov = tiou4(d.start_s, d.end_s, *g)
                                if ov > best_ov:
                                    best, best_ov = j, ov
                            remaining[vid].pop(best)
                        flags.append(fl[0])
                    aps.append(oracles.average_precision_reference(flags, num_gt))
                    assert report.ap[name][ti] == aps[-1]
                want = float(np.mean(aps)) if aps else 0.0
                assert report.map_per_threshold[ti] == pytest.approx(want, abs=1e-15)

    def test_equal_score_permutation_invariance(self):
        gts = {"v1": [(0.0, 4.0, 1), (10.0, 14.0, 1)]}
        a = seg(0.0, 4.0, 1, 0.5)
        b = seg(10.0, 14.0, 1, 0.5)
        r1 = map_report({"v1": [a, b]}, gts, ["x"], EvalProtocol())
        r2 = map_report({"v1": [b, a]}, gts, ["x"], EvalProtocol())
        assert r1.ap == r2.ap

    def test_protocol_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            EvalProtocol(thresholds=(0.5, 0.5)).validate()
        with pytest.raises(ValueError, match="thresholds"):
            EvalProtocol(thresholds=(0.0, 0.5)).validate()

    def test_tables_well_formed(self):
        gts = {"v1": [(1.0, 3.0, 1)]}
        dets = {"v1": [seg(1.0, 3.0, 1, 0.9)]}
        report = map_report(dets, gts, ["a"], EvalProtocol())
        text = report.text_table()
        assert "mAP" in text and "AP@0.30" in text
        tsv = report.tsv()
        lines = tsv.strip().split("\n")
        assert lines[0].split("\t") == ["class", "0.30", "0.40", "0.50", "0.60", "0.70", "avg"]
        assert lines[-1].split("\t")[0] == "mAP"
