"""Dataset generator and loader: determinism, round trips, error paths,
frame-level separability of the synthetic features."""

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from actionloc.data import (ActionInstance, Dataset, DatasetError,
                            SyntheticSpec, actions_in_frames, generate, load)


def tiny_spec(**kw):
    base = dict(num_videos=6, t_range=(64, 96), feature_dim=16, classes=3,
                actions_range=(1, 2), length_range=(8, 24), margin=0.2,
                noise=0.1, blend=1, seed=7, feature_fps=4.0, val_fraction=0.5)
    base.update(kw)
    return SyntheticSpec(**base)


class TestGenerate:
    def test_roundtrip_lossless(self, tmp_path):
        manifest = generate(tiny_spec(), tmp_path)
        ds = load(manifest)
        assert ds.feature_dim == 16
        assert ds.num_classes == 3
        assert len(ds.videos) == 6
        raw = json.loads(Path(manifest).read_text())
        for entry, video in zip(raw["videos"], ds.videos):
            assert entry["id"] == video.id
            assert entry["frames"] == video.frames
            stored = np.frombuffer((tmp_path / entry["file"]).read_bytes(),
                                   dtype="<f4").reshape(16, video.frames)
            np.testing.assert_array_equal(video.features, stored.astype(np.float64))
            assert len(entry["annotations"]) == len(video.annotations)
            for a_raw, a in zip(entry["annotations"], video.annotations):
                assert a_raw["start"] == a.start_s and a_raw["end"] == a.end_s

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate(tiny_spec(), a)
        generate(tiny_spec(), b)
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate(tiny_spec(seed=1), a)
        generate(tiny_spec(seed=2), b)
        assert (a / "video_0000.feat").read_bytes() != (b / "video_0000.feat").read_bytes()

    def test_annotations_within_bounds_and_disjoint(self, tmp_path):
        ds = load(generate(tiny_spec(num_videos=20, actions_range=(1, 3)), tmp_path))
        for v in ds.videos:
            assert 1 <= len(v.annotations) <= 3
            spans = sorted((a.start_s, a.end_s) for a in v.annotations)
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert e1 <= s2
            for a in v.annotations:
                assert 0 <= a.start_s < a.end_s <= v.duration(ds.feature_fps)
                assert 1 <= a.label <= 3

    def test_noise_free_blend_free_frames_hit_prototypes(self, tmp_path):
        ds = load(generate(tiny_spec(noise=0.0, blend=0, num_videos=4), tmp_path))
        fps = ds.feature_fps
        # all interior action frames of one class must be a single vector
        for v in ds.videos:
            for a in v.annotations:
                s, e = int(a.start_s * fps), int(a.end_s * fps)
                block = v.features[:, s:e]
                assert np.ptp(block, axis=1).max() == 0.0
                assert np.linalg.norm(block[:, 0]) == pytest.approx(1.0, abs=1e-6)

    def test_infeasible_spec_rejected(self):
        with pytest.raises(DatasetError, match="infeasible"):
            tiny_spec(length_range=(80, 100), t_range=(64, 64)).validate()

    def test_overcrowded_video_rejected(self, tmp_path):
        spec = tiny_spec(num_videos=1, t_range=(64, 64), actions_range=(8, 8),
                         length_range=(20, 24))
        with pytest.raises(DatasetError, match="could not place"):
            generate(spec, tmp_path)

    def test_margin_too_tight_rejected(self, tmp_path):
        spec = tiny_spec(feature_dim=2, classes=8, margin=-0.9)
        with pytest.raises(DatasetError, match="prototypes"):
            generate(spec, tmp_path)

    def test_split_fractions(self, tmp_path):
        ds = load(generate(tiny_spec(num_videos=10, val_fraction=0.3), tmp_path))
        assert len(ds.split("train")) == 7
        assert len(ds.split("val")) == 3


class TestLoad:
    def test_truncated_feature_file_names_record(self, tmp_path):
        manifest = generate(tiny_spec(), tmp_path)
        target = tmp_path / "video_0002.feat"
        target.write_bytes(target.read_bytes()[:-8])
        with pytest.raises(DatasetError, match="video_0002"):
            load(manifest)

    def test_checksum_mismatch_rejected(self, tmp_path):
        manifest = generate(tiny_spec(), tmp_path)
        blob = bytearray((tmp_path / "video_0001.feat").read_bytes())
        blob[0] ^= 0xFF
        (tmp_path / "video_0001.feat").write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="checksum"):
            load(manifest)

    def test_unknown_manifest_field_warns_but_loads(self, tmp_path, caplog):
        manifest = generate(tiny_spec(), tmp_path)
        raw = json.loads(Path(manifest).read_text())
        raw["experimental_flag"] = True
        raw["videos"][0]["camera"] = "left"
        Path(manifest).write_text(json.dumps(raw))
        with caplog.at_level(logging.WARNING, logger="actionloc"):
            ds = load(manifest)
        assert len(ds.videos) == 6
        assert "experimental_flag" in caplog.text
        assert "camera" in caplog.text

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load(tmp_path / "nope.json")

    def test_bad_annotation_rejected(self, tmp_path):
        manifest = generate(tiny_spec(), tmp_path)
        raw = json.loads(Path(manifest).read_text())
        raw["videos"][3]["annotations"][0]["end"] = 1e9
        Path(manifest).write_text(json.dumps(raw))
        with pytest.raises(DatasetError, match="video_0003"):
            load(manifest)

    def test_aggregate_report_counts_all_bad_records(self, tmp_path):
        manifest = generate(tiny_spec(), tmp_path)
        raw = json.loads(Path(manifest).read_text())
        raw["videos"][0]["annotations"][0]["label"] = "class_99"
        raw["videos"][1]["frames"] = 5
        Path(manifest).write_text(json.dumps(raw))
        with pytest.raises(DatasetError, match="2 invalid record"):
            load(manifest)


class TestSeparability:
    def test_linear_classifier_frame_accuracy(self, tmp_path):
        # nearest class centroid (a linear rule) on noise 0.1, margin 0.2
        ds = load(generate(tiny_spec(num_videos=12, noise=0.1, margin=0.2,
                                     blend=0, val_fraction=0.5), tmp_path))
        fps = ds.feature_fps

        def frames_and_labels(videos):
            xs, ys = [], []
            for v in videos:
                label = np.zeros(v.frames, dtype=int)
                for a in v.annotations:
                    label[int(a.start_s * fps):int(a.end_s * fps)] = a.label
                xs.append(v.features)
                ys.append(label)
            return np.concatenate(xs, axis=1), np.concatenate(ys)

        x_tr, y_tr = frames_and_labels(ds.split("train"))
        x_te, y_te = frames_and_labels(ds.split("val"))
        centroids = np.stack([x_tr[:, y_tr == c].mean(axis=1) for c in range(4)])
        scores = centroids @ x_te - 0.5 * (centroids ** 2).sum(axis=1, keepdims=True)
        acc = (scores.argmax(axis=0) == y_te).mean()
        assert acc > 0.99


class TestConversions:
    def test_actions_in_frames(self):
        v = ds_stub()
        out = actions_in_frames(v, fps=4.0)
        assert out == [(8.0, 20.0, 2)]


def ds_stub():
    from actionloc.data import VideoRecord
    return VideoRecord(id="v", frames=64, subset="train",
                       annotations=[ActionInstance(2.0, 5.0, 2)],
                       features=np.zeros((4, 64)))
