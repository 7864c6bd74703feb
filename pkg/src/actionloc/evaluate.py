"""Detection-quality evaluation: per-class AP over a tIoU threshold grid.

Matching is greedy in score order: a prediction claims the unmatched
ground truth with the highest overlap, provided it reaches the
threshold, and every ground truth is claimable once.  AP integrates the
all-point interpolated precision-recall curve; classes without ground
truth are skipped.  mAP at a threshold averages classes, and the
headline number averages the thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detect import ScoredSegment
from .losses import tiou


@dataclass
class EvalProtocol:
    thresholds: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)

    def validate(self) -> None:
        t = self.thresholds
        if not t or any(not (0.0 < x <= 1.0) for x in t):
            raise ValueError(f"thresholds must lie in (0, 1], got {t}")
        if any(t[i] >= t[i + 1] for i in range(len(t) - 1)):
            raise ValueError(f"thresholds must be strictly increasing, got {t}")


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    class_names: list[str]
    ap: dict[str, list[float]]          # class name -> AP per threshold
    map_per_threshold: list[float]
    average_map: float
    num_gt: dict[str, int] = field(default_factory=dict)

    def text_table(self) -> str:
        head = ["class".ljust(16)] + [f"AP@{t:.2f}".rjust(9) for t in self.thresholds] \
            + ["Avg".rjust(9)]
        lines = ["  ".join(head)]
        for name in self.class_names:
            if name not in self.ap:
                continue
            vals = self.ap[name]
            lines.append("  ".join(
                [name.ljust(16)] + [f"{v:9.4f}" for v in vals]
                + [f"{np.mean(vals):9.4f}"]))
        lines.append("  ".join(
            ["mAP".ljust(16)] + [f"{v:9.4f}" for v in self.map_per_threshold]
            + [f"{self.average_map:9.4f}"]))
        return "\n".join(lines)

    def tsv(self) -> str:
        head = ["class"] + [f"{t:.2f}" for t in self.thresholds] + ["avg"]
        rows = ["\t".join(head)]
        for name in self.class_names:
            if name not in self.ap:
                continue
            vals = self.ap[name]
            rows.append("\t".join([name] + [f"{v:.6f}" for v in vals]
                                  + [f"{float(np.mean(vals)):.6f}"]))
        rows.append("\t".join(["mAP"] + [f"{v:.6f}" for v in self.map_per_threshold]
                              + [f"{self.average_map:.6f}"]))
        return "\n".join(rows) + "\n"


def match(preds: list[tuple[float, float]], gts: list[tuple[float, float]],
          threshold: float) -> list[bool]:
    """TP/FP flags for score-sorted predictions of one class in one video."""
    available = list(range(len(gts)))
    flags = []
    for ps, pe in preds:
        best_j, best_ov = -1, 0.0
        for j in available:
            ov = tiou((ps, pe), gts[j])
            if ov > best_ov:
                best_j, best_ov = j, ov
        if best_j >= 0 and best_ov >= threshold:
            available.remove(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], num_gt: int) -> float:
    """Area under the interpolated PR curve (all-point interpolation)."""
    if num_gt <= 0:
        raise ValueError("average_precision: num_gt must be positive")
    if not flags:
        return 0.0
    tp = 0
    precisions = []
    recalls = []
    for i, f in enumerate(flags):
        if f:
            tp += 1
        precisions.append(tp / (i + 1))
        recalls.append(tp / num_gt)
    for i in range(len(precisions) - 2, -1, -1):
        if precisions[i + 1] > precisions[i]:
            precisions[i] = precisions[i + 1]
    ap = 0.0
    prev = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def _sorted_class_preds(detections_by_video: dict[str, list[ScoredSegment]],
                        label: int) -> list[tuple[str, ScoredSegment]]:
    pool = [(vid, d) for vid, dets in detections_by_video.items()
            for d in dets if d.label == label]
    pool.sort(key=lambda vd: (-vd[1].score, vd[1].start_s, vd[0], vd[1].end_s))
    return pool


def map_report(detections_by_video: dict[str, list[ScoredSegment]],
               gts_by_video: dict[str, list[tuple[float, float, int]]],
               class_names: list[str],
               protocol: EvalProtocol) -> EvalReport:
    """Full evaluation over videos: per-class AP table and mAP summary.

    `gts_by_video` holds (start_s, end_s, label) triples.  Classes with no
    ground truth anywhere are left out of every average.
    """
    protocol.validate()
    ap: dict[str, list[float]] = {}
    num_gt: dict[str, int] = {}
    for label, name in enumerate(class_names, start=1):
        gt_count = sum(1 for gts in gts_by_video.values() for g in gts if g[2] == label)
        if gt_count == 0:
            continue
        num_gt[name] = gt_count
        pool = _sorted_class_preds(detections_by_video, label)
        ap[name] = []
        for tau in protocol.thresholds:
            flags: list[bool] = []
            # matching is per video; walking the merged score order keeps
            # the global PR curve consistent
            matched: dict[str, set[int]] = {}
            for vid, det in pool:
                gts = [(g[0], g[1]) for g in gts_by_video.get(vid, []) if g[2] == label]
                taken = matched.setdefault(vid, set())
                best_j, best_ov = -1, 0.0
                for j, seg in enumerate(gts):
                    if j in taken:
                        continue
                    ov = tiou((det.start_s, det.end_s), seg)
                    if ov > best_ov:
                        best_j, best_ov = j, ov
                if best_j >= 0 and best_ov >= tau:
                    taken.add(best_j)
                    flags.append(True)
                else:
                    flags.append(False)
            ap[name].append(average_precision(flags, gt_count))
    if ap:
        map_per_t = [float(np.mean([ap[n][i] for n in ap]))
                     for i in range(len(protocol.thresholds))]
        avg = float(np.mean(map_per_t))
    else:
        map_per_t = [0.0 for _ in protocol.thresholds]
        avg = 0.0
    return EvalReport(thresholds=protocol.thresholds, class_names=class_names,
                      ap=ap, map_per_threshold=map_per_t, average_map=avg,
                      num_gt=num_gt)
