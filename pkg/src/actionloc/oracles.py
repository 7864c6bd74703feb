"""Brute-force reference implementations used to cross-check the fast paths.

Everything here is written the slow, obvious way (explicit loops, direct
summation) and stays independent of the implementations it verifies.  The
test suite and the `selftest` command compare the production code against
these references.
"""

from __future__ import annotations

import math

import numpy as np


def dft_direct(x: np.ndarray) -> np.ndarray:
    """O(T^2) complex DFT per channel by literal summation."""
    x = np.asarray(x, dtype=np.float64)
    d, t = x.shape
    out = np.zeros((d, t), dtype=np.complex128)
    for u in range(t):
        for n in range(t):
            out[:, u] += x[:, n] * np.exp(-2j * math.pi * u * n / t)
    return out


def idft_direct(y: np.ndarray) -> np.ndarray:
    """O(T^2) complex inverse DFT per channel by literal summation."""
    y = np.asarray(y, dtype=np.complex128)
    d, t = y.shape
    out = np.zeros((d, t), dtype=np.complex128)
    for n in range(t):
        for u in range(t):
            out[:, n] += y[:, u] * np.exp(2j * math.pi * u * n / t)
    return out / t


def circular_conv(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """O(T^2) circular convolution per channel: out[t] = sum_tau x[tau] k[(t-tau) mod T]."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d, t = x.shape
    out = np.zeros((d, t))
    for i in range(t):
        for tau in range(t):
            out[:, i] += x[:, tau] * k[:, (i - tau) % t]
    return out


def soft_nms_reference(candidates, sigma: float, floor: float, tiou_fn):
    """Naive Gaussian Soft-NMS: rebuild the remaining pool every round.

    `candidates` is a list of (start, end, label, score, order_key) tuples;
    `order_key` breaks score ties deterministically.  Returns the surviving
    tuples with decayed scores, sorted by final score (desc) then order_key.
    Suppression is per label only.
    """
    pool = [list(c) for c in candidates]
    kept = []
    while pool:
        best = 0
        for i in range(1, len(pool)):
            if (-pool[i][3], pool[i][4]) < (-pool[best][3], pool[best][4]):
                best = i
        top = pool.pop(best)
        kept.append(top)
        survivors = []
        for c in pool:
            if c[2] == top[2]:
                ov = tiou_fn(c[0], c[1], top[0], top[1])
                c[3] = c[3] * math.exp(-(ov * ov) / sigma)
            if c[3] >= floor:
                survivors.append(c)
        pool = survivors
    kept.sort(key=lambda c: (-c[3], c[4]))
    return [tuple(c) for c in kept]


def match_reference(preds, gts, threshold: float, tiou_fn):
    """Naive greedy matching for one (class, video) bucket.

    `preds` must already be sorted by descending score.  Each prediction
    takes the still-unmatched ground truth with the highest overlap, if that
    overlap reaches the threshold.  Returns a TP/FP flag per prediction.
    """
    taken = [False] * len(gts)
    flags = []
    for ps, pe in preds:
        best, best_ov = -1, 0.0
        for j, (gs, ge) in enumerate(gts):
            if taken[j]:
                continue
            ov = tiou_fn(ps, pe, gs, ge)
            if ov > best_ov:
                best, best_ov = j, ov
        if best >= 0 and best_ov >= threshold:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision_reference(flags, num_gt: int) -> float:
    """AP by explicitly building the PR curve and its interpolated area.

    Walks every prefix of the (score-ordered) flag list, makes precision
    monotone by a right-to-left max scan, then accumulates rectangle areas
    left to right wherever recall advances.
    """
    if num_gt <= 0:
        raise ValueError("average_precision_reference: num_gt must be positive")
    if not flags:
        return 0.0
    precisions, recalls = [], []
    tp = 0
    for i, f in enumerate(flags):
        if f:
            tp += 1
        precisions.append(tp / (i + 1))
        recalls.append(tp / num_gt)
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return ap


def assignment_reference(actions, level_lengths, strides, radius: float, ranges):
    """Literal per-instant evaluation of the positive-sample rule.

    `actions` holds (start_frame, end_frame, label) triples.  For every
    level and instant the rule is checked against every action: the instant
    must sit strictly inside the action, within `radius * stride` frames of
    its center, and the larger boundary offset must fall in the level's
    frame range.  Competing actions resolve to the shortest one.  Returns
    per level a dict: instant -> (label, start_grid, end_grid).
    """
    out = []
    for lvl, (t_len, stride) in enumerate(zip(level_lengths, strides)):
        lo, hi = ranges[lvl]
        assigned = {}
        for t in range(t_len):
            pos = t * stride
            winner = None
            for s, e, label in actions:
                if not (s < pos < e):
                    continue
                center = 0.5 * (s + e)
                if abs(pos - center) > radius * stride:
                    continue
                reach = max(pos - s, e - pos)
                if not (lo < reach <= hi):
                    continue
                key = (e - s, s, label)
                if winner is None or key < winner[0]:
                    winner = (key, (label, s / stride, e / stride))
            if winner is not None:
                label, s_g, e_g = winner[1]
                assigned[t] = (label, s_g, e_g)
        out.append(assigned)
    return out
