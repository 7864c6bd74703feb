"""Positive-sample assignment over the pyramid by center sampling.

An instant t at level l (frame position t * stride_l) is a positive for
an action iff it lies strictly inside the action, within
`radius * stride_l` frames of the action's center, and the larger of its
two boundary offsets falls inside the level's frame range.  Instants
claimed by several actions go to the shortest one.  Regression targets
are stored in the level's grid units (frames / stride).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_RADIUS = 1.5


def level_ranges(levels: int) -> list[tuple[float, float]]:
    """Per-level frame-offset ranges (0,4], (4,8], ... with an open top."""
    bounds = [0.0] + [4.0 * 2 ** i for i in range(levels - 1)] + [math.inf]
    return [(bounds[i], bounds[i + 1]) for i in range(levels)]


@dataclass
class LevelAssignment:
    labels: np.ndarray   # (T,) int, 0 = background
    starts: np.ndarray   # (T,) grid units, valid where labels > 0
    ends: np.ndarray     # (T,)

    @property
    def pos_mask(self) -> np.ndarray:
        return self.labels > 0


@dataclass
class Assignment:
    levels: list[LevelAssignment]

    @property
    def num_pos(self) -> int:
        return int(sum(lv.pos_mask.sum() for lv in self.levels))

    @property
    def num_neg(self) -> int:
        return int(sum((~lv.pos_mask).sum() for lv in self.levels))


def assign_targets(actions: list[tuple[float, float, int]],
                   level_lengths: list[int],
                   strides: list[int],
                   radius: float = DEFAULT_RADIUS,
                   ranges: list[tuple[float, float]] | None = None) -> Assignment:
    """Assign ground-truth actions (start_frame, end_frame, label) to instants.

    Actions are walked shortest first, so contested instants resolve to
    the smallest action; ties fall to the earlier, lower-labelled one.
    """
    if ranges is None:
        ranges = level_ranges(len(level_lengths))
    out = []
    ordered = sorted(actions, key=lambda a: (a[1] - a[0], a[0], a[2]))
    for (t_len, stride, (lo, hi)) in zip(level_lengths, strides, ranges):
        labels = np.zeros(t_len, dtype=np.int64)
        starts = np.zeros(t_len)
        ends = np.zeros(t_len)
        pos = np.arange(t_len) * float(stride)
        for s, e, label in ordered:
            center = 0.5 * (s + e)
            reach = np.maximum(pos - s, e - pos)
            cond = ((pos > s) & (pos < e)
                    & (np.abs(pos - center) <= radius * stride)
                    & (reach > lo) & (reach <= hi)
                    & (labels == 0))
            labels[cond] = label
            starts[cond] = s / stride
            ends[cond] = e / stride
        out.append(LevelAssignment(labels, starts, ends))
    return Assignment(out)
