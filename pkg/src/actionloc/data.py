"""Synthetic benchmark generation and the on-disk dataset format.

A dataset directory holds `manifest.json` plus one raw feature file per
video.  Feature files are little-endian float32, row-major (D, T).  The
manifest records the feature dimension, features-per-second rate, class
names, and per video: id, file name, frame count, train/val subset, a
sha256 checksum and the annotations in seconds.

Synthetic videos are built from fixed near-orthogonal unit prototypes:
background frames draw around prototype 0, frames inside an action of
class c around prototype c, with a linear cross-fade over the boundary
blend width and isotropic Gaussian noise on top.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("actionloc")

MANIFEST_NAME = "manifest.json"
_KNOWN_MANIFEST_KEYS = {"format_version", "feature_dim", "feature_fps", "classes", "videos"}
_KNOWN_VIDEO_KEYS = {"id", "file", "frames", "subset", "sha256", "annotations"}


class DatasetError(ValueError):
    pass


@dataclass
class ActionInstance:
    start_s: float
    end_s: float
    label: int  # 1-based class id


@dataclass
class VideoRecord:
    id: str
    frames: int
    subset: str
    annotations: list[ActionInstance]
    features: np.ndarray  # (D, T) float64

    def duration(self, fps: float) -> float:
        return self.frames / fps


@dataclass
class Dataset:
    feature_dim: int
    feature_fps: float
    class_names: list[str]
    videos: list[VideoRecord]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, subset: str) -> list[VideoRecord]:
        return [v for v in self.videos if v.subset == subset]


@dataclass
class SyntheticSpec:
    num_videos: int = 20
    t_range: tuple[int, int] = (128, 256)
    feature_dim: int = 32
    classes: int = 5
    actions_range: tuple[int, int] = (1, 3)
    length_range: tuple[int, int] = (8, 48)
    margin: float = 0.2
    noise: float = 0.1
    blend: int = 1
    seed: int = 0
    feature_fps: float = 4.0
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.num_videos < 1 or self.classes < 1:
            raise DatasetError("num_videos and classes must be positive")
        if not (0 < self.t_range[0] <= self.t_range[1]):
            raise DatasetError(f"bad t_range {self.t_range}")
        if not (0 < self.length_range[0] <= self.length_range[1]):
            raise DatasetError(f"bad length_range {self.length_range}")
        if not (0 <= self.actions_range[0] <= self.actions_range[1]):
            raise DatasetError(f"bad actions_range {self.actions_range}")
        if self.noise < 0 or self.blend < 0:
            raise DatasetError("noise and blend must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise DatasetError("val_fraction must be in [0, 1)")
        if self.length_range[1] + 2 > self.t_range[0]:
            raise DatasetError(
                f"infeasible: max action length {self.length_range[1]} cannot fit "
                f"in the shortest video ({self.t_range[0]} frames)")

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise DatasetError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        spec = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
        spec.validate()
        return spec


def _prototypes(dim: int, count: int, margin: float,
                rng: np.random.Generator) -> np.ndarray:
    """`count` unit vectors with pairwise dot products below `margin`."""
    protos: list[np.ndarray] = []
    attempts = 0
    while len(protos) < count:
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(np.dot(v, p)) < margin for p in protos):
            protos.append(v)
        attempts += 1
        if attempts > 1000 * count:
            raise DatasetError(
                f"infeasible: cannot place {count} prototypes in {dim} dims "
                f"with separation margin {margin}")
    return np.stack(protos)


def _place_actions(t: int, count: int, length_range: tuple[int, int],
                   gap: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping (start, end) frame intervals, `gap` frames apart."""
    placed: list[tuple[int, int]] = []
    for _ in range(count):
        ok = False
        for _attempt in range(200):
            length = int(rng.integers(length_range[0], length_range[1] + 1))
            if t - length - 1 < 1:
                continue
            s = int(rng.integers(1, t - length))
            e = s + length
            if all(e + gap <= ps or pe + gap <= s for ps, pe in placed):
                placed.append((s, e))
                ok = True
                break
        if not ok:
            raise DatasetError(
                f"infeasible: could not place {count} actions of length "
                f"{length_range} in {t} frames")
    return sorted(placed)


def generate(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write a synthetic dataset; returns the manifest path.

    Fully deterministic for a fixed spec: prototypes and every video draw
    from dedicated child seeds of `spec.seed`.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_videos + 1)
    protos = _prototypes(spec.feature_dim, spec.classes + 1, spec.margin,
                         np.random.default_rng(seeds[0]))
    train_count = spec.num_videos - int(round(spec.num_videos * spec.val_fraction))

    videos = []
    for i in range(spec.num_videos):
        rng = np.random.default_rng(seeds[i + 1])
        t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        n_actions = int(rng.integers(spec.actions_range[0], spec.actions_range[1] + 1))
        gap = max(2, 2 * spec.blend + 1)
        intervals = _place_actions(t, n_actions, spec.length_range, gap, rng)
        labels = [int(rng.integers(1, spec.classes + 1)) for _ in intervals]

        lam = np.zeros(t)
        cls_of_frame = np.zeros(t, dtype=int)
        for (s, e), label in zip(intervals, labels):
            frames = np.arange(s, e)
            depth = np.minimum(frames - s + 1, e - frames)
            lam[s:e] = np.minimum(1.0, depth / (spec.blend + 1))
            cls_of_frame[s:e] = label
        feats = (1.0 - lam)[None, :] * protos[0][:, None] \
            + lam[None, :] * protos[cls_of_frame].T
        feats = feats + spec.noise * rng.normal(size=(spec.feature_dim, t))

        vid = f"video_{i:04d}"
        fname = f"{vid}.feat"
        payload = feats.astype("<f4").tobytes()
        (out / fname).write_bytes(payload)
        videos.append({
            "id": vid,
            "file": fname,
            "frames": t,
            "subset": "train" if i < train_count else "val",
            "sha256": hashlib.sha256(payload).hexdigest(),
            "annotations": [
                {"label": f"class_{label}",
                 "start": s / spec.feature_fps,
                 "end": e / spec.feature_fps}
                for (s, e), label in zip(intervals, labels)
            ],
        })

    manifest = {
        "format_version": 1,
        "feature_dim": spec.feature_dim,
        "feature_fps": spec.feature_fps,
        "classes": [f"class_{c}" for c in range(1, spec.classes + 1)],
        "videos": videos,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load(manifest_path: str | Path) -> Dataset:
    """Read a dataset into memory, validating shapes, checksums and annotations.

    Unknown manifest fields log a warning and are ignored; any invariant
    violation is collected and reported per record in one error.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON: {exc}") from None

    unknown = set(raw) - _KNOWN_MANIFEST_KEYS
    if unknown:
        log.warning("manifest %s: ignoring unknown fields %s", path, sorted(unknown))
    for key in ("feature_dim", "feature_fps", "classes", "videos"):
        if key not in raw:
            raise DatasetError(f"{path}: manifest missing required field {key!r}")

    dim = int(raw["feature_dim"])
    fps = float(raw["feature_fps"])
    class_names = list(raw["classes"])
    label_of = {name: i + 1 for i, name in enumerate(class_names)}
    base = path.parent

    problems: list[str] = []
    videos: list[VideoRecord] = []
    for entry in raw["videos"]:
        vid = entry.get("id", "<missing id>")
        extra = set(entry) - _KNOWN_VIDEO_KEYS
        if extra:
            log.warning("video %s: ignoring unknown fields %s", vid, sorted(extra))
        try:
            frames = int(entry["frames"])
            fpath = base / entry["file"]
            blob = fpath.read_bytes()
            if "sha256" in entry:
                digest = hashlib.sha256(blob).hexdigest()
                if digest != entry["sha256"]:
                    raise DatasetError(f"checksum mismatch for {entry['file']}")
            if len(blob) != 4 * dim * frames:
                raise DatasetError(
                    f"feature file {entry['file']} holds {len(blob)} bytes, "
                    f"expected {4 * dim * frames} for ({dim}, {frames})")
            feats = np.frombuffer(blob, dtype="<f4").reshape(dim, frames).astype(np.float64)
            duration = frames / fps
            annos = []
            for a in entry.get("annotations", []):
                if a["label"] not in label_of:
                    raise DatasetError(f"unknown class {a['label']!r}")
                s, e = float(a["start"]), float(a["end"])
                if not (0.0 <= s < e <= duration + 1e-9):
                    raise DatasetError(f"annotation [{s}, {e}] outside [0, {duration:.3f}]")
                annos.append(ActionInstance(s, e, label_of[a["label"]]))
            videos.append(VideoRecord(
                id=str(entry["id"]), frames=frames,
                subset=str(entry.get("subset", "train")),
                annotations=annos, features=feats))
        except (KeyError, OSError, ValueError, DatasetError) as exc:
            problems.append(f"{vid}: {exc}")
    if problems:
        raise DatasetError(
            f"{len(problems)} invalid record(s) in {path}:\n  " + "\n  ".join(problems))
    return Dataset(feature_dim=dim, feature_fps=fps,
                   class_names=class_names, videos=videos)


def actions_in_frames(video: VideoRecord, fps: float) -> list[tuple[float, float, int]]:
    """Annotations converted to (start_frame, end_frame, label)."""
    return [(a.start_s * fps, a.end_s * fps, a.label) for a in video.annotations]
