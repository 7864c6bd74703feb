"""Turn decoder outputs into scored, deduplicated detections.

Candidates are every (level, instant, class) whose refined score clears
the threshold; their boundaries are clamped to the level grid, mapped to
seconds (grid * stride / fps) and clipped to the video extent.  The
top-K by score then pass through Gaussian Soft-NMS per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decoder import LevelOutputs
from .losses import tiou


@dataclass
class InferenceSettings:
    threshold: float = 0.001
    top_k: int = 200
    sigma: float = 0.5
    floor: float = 0.001

    def validate(self) -> None:
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError(f"inference.threshold must be in [0, 1), got {self.threshold}")
        if self.sigma <= 0:
            raise ValueError(f"inference.sigma must be positive, got {self.sigma}")
        if self.top_k < 1:
            raise ValueError("inference.top_k must be >= 1")
        if self.floor < 0:
            raise ValueError("inference.floor must be >= 0")


@dataclass
class ScoredSegment:
    start_s: float
    end_s: float
    label: int
    score: float
    source_level: int = 0

    def tie_key(self):
        return (self.start_s, self.label, self.end_s, self.source_level)


def collect(outputs: list[LevelOutputs], strides: list[int], feature_fps: float,
            duration_s: float, settings: InferenceSettings) -> list[ScoredSegment]:
    """Thresholded candidates from every level, capped at top-K by score."""
    settings.validate()
    cands: list[ScoredSegment] = []
    for lvl_idx, (out, stride) in enumerate(zip(outputs, strides)):
        scores = out.cls_refined.value
        t_len = scores.shape[1]
        hi = max(t_len - 1.0, 1e-3)
        end_g = np.clip(out.end_refined.value[0], 1e-3, hi)
        start_g = np.clip(out.start_refined.value[0], 0.0, end_g - 1e-3)
        scale = stride / feature_fps
        cls_idx, t_idx = np.nonzero(scores > settings.threshold)
        for c, t in zip(cls_idx, t_idx):
            e_s = min(end_g[t] * scale, duration_s)
            s_s = min(start_g[t] * scale, max(e_s - 1e-6, 0.0))
            cands.append(ScoredSegment(
                start_s=float(s_s), end_s=float(e_s), label=int(c) + 1,
                score=float(scores[c, t]), source_level=lvl_idx + 1))
    cands.sort(key=lambda d: (-d.score,) + d.tie_key())
    return cands[:settings.top_k]


def soft_nms(cands: list[ScoredSegment], sigma: float,
             floor: float) -> list[ScoredSegment]:
    """Gaussian Soft-NMS, per class: decay instead of delete.

    Greedily keeps the best-scored candidate (ties: earlier start, lower
    class), multiplies remaining same-class scores by exp(-tIoU^2 / sigma)
    and drops anything below `floor`.  Never raises a score.
    """
    pool = [ScoredSegment(c.start_s, c.end_s, c.label, c.score, c.source_level)
            for c in cands]
    kept: list[ScoredSegment] = []
    while pool:
        best = 0
        for i in range(1, len(pool)):
            if (-pool[i].score,) + pool[i].tie_key() < (-pool[best].score,) + pool[best].tie_key():
                best = i
        top = pool.pop(best)
        kept.append(top)
        survivors = []
        for c in pool:
            if c.label == top.label:
                ov = tiou((c.start_s, c.end_s), (top.start_s, top.end_s))
                c.score = c.score * math.exp(-(ov * ov) / sigma)
            if c.score >= floor:
                survivors.append(c)
        pool = survivors
    kept.sort(key=lambda c: (-c.score,) + c.tie_key())
    return kept


def detect(outputs: list[LevelOutputs], strides: list[int], feature_fps: float,
           duration_s: float, settings: InferenceSettings) -> list[ScoredSegment]:
    cands = collect(outputs, strides, feature_fps, duration_s, settings)
    return soft_nms(cands, settings.sigma, settings.floor)


def write_detections(path, detections_by_video: dict[str, list[ScoredSegment]],
                     class_names: list[str]) -> None:
    """Tab-separated detections, one per line, in a bit-stable order."""
    lines = ["video\tlabel\tstart_s\tend_s\tscore"]
    for vid in sorted(detections_by_video):
        ordered = sorted(detections_by_video[vid], key=lambda d: (-d.score,) + d.tie_key())
        for d in ordered:
            lines.append(f"{vid}\t{class_names[d.label - 1]}"
                         f"\t{d.start_s:.6f}\t{d.end_s:.6f}\t{d.score:.9f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
