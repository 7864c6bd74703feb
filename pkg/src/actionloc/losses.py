"""Training losses: quality-weighted focal classification plus IoU regression.

The classification loss treats each (class, instant) entry as a binary
problem.  Positive entries target the overlap quality q of the current
refined prediction (held constant, no gradient through q); background
entries get the focal down-weighting  -alpha * p^gamma * log(1-p).
Positive instants additionally pay 1 - tIoU on their refined boundaries,
and their classification term is weighted by that same overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .decoder import LevelOutputs
from .targets import Assignment

VFL_ALPHA = 0.75
VFL_GAMMA = 2.0
_P_CLAMP = 1e-7
_UNION_EPS = 1e-9


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal IoU of two (start, end) segments; 0 when the union is empty."""
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def varifocal_scalar(p: float, q: float,
                     alpha: float = VFL_ALPHA, gamma: float = VFL_GAMMA) -> float:
    """Single-entry classification loss, the formula the map version vectorises."""
    p = min(max(p, _P_CLAMP), 1.0 - _P_CLAMP)
    if q > 0.0:
        return -q * (q * np.log(p) + (1.0 - q) * np.log(1.0 - p))
    return -alpha * p ** gamma * np.log(1.0 - p)


def _clamp_probs(p: Var) -> Var:
    lo = ad.const(np.full(p.value.shape, _P_CLAMP))
    hi = ad.const(np.full(p.value.shape, 1.0 - _P_CLAMP))
    return ad.maximum(ad.minimum(p, hi), lo)


def varifocal_map(p: Var, q: np.ndarray,
                  alpha: float = VFL_ALPHA, gamma: float = VFL_GAMMA) -> Var:
    """Elementwise classification loss over a (C, T) probability map.

    `q` is a constant target-quality array of the same shape; entries with
    q == 0 use the focal background form.  gamma is fixed at 2 (p^gamma is
    expanded as p*p).
    """
    if gamma != 2.0:
        raise ValueError("varifocal_map is specialised to gamma == 2")
    if q.shape != p.value.shape:
        raise ValueError(f"quality shape {q.shape} != probability shape {p.value.shape}")
    p = _clamp_probs(p)
    qc = ad.const(q)
    pos = q > 0.0
    log_p = ad.log(p)
    log_1p = ad.log(ad.affine(p, -1.0, 1.0))
    # -q * (q log p + (1-q) log(1-p)) on positive entries
    pos_term = ad.mul(ad.affine(qc, -1.0, 0.0),
                      ad.add(ad.mul(qc, log_p),
                             ad.mul(ad.affine(qc, -1.0, 1.0), log_1p)))
    # -alpha p^2 log(1-p) on background entries
    neg_term = ad.affine(ad.mul(ad.mul(p, p), log_1p), -alpha, 0.0)
    mask = ad.const(pos.astype(np.float64))
    inv_mask = ad.const((~pos).astype(np.float64))
    return ad.add(ad.mul(pos_term, mask), ad.mul(neg_term, inv_mask))


def iou_loss_map(start: Var, end: Var,
                 target_start: np.ndarray, target_end: np.ndarray) -> Var:
    """1 - tIoU between predicted and target segments, per instant (1, T).

    Degenerate predictions (start >= end) have zero overlap by
    construction and cost exactly 1.
    """
    ts = ad.const(target_start.reshape(1, -1))
    te = ad.const(target_end.reshape(1, -1))
    inter = ad.relu(ad.sub(ad.minimum(end, te), ad.maximum(start, ts)))
    pred_len = ad.sub(end, start)
    gt_len = ad.sub(te, ts)
    union = ad.sub(ad.add(pred_len, gt_len), inter)
    union = ad.maximum(union, ad.const(np.full(union.value.shape, _UNION_EPS)))
    return ad.affine(ad.div(inter, union), -1.0, 1.0)


@dataclass
class LossBreakdown:
    total: Var
    vfl_pos: float
    vfl_neg: float
    iou: float
    num_pos: int
    num_neg: int

    @property
    def value(self) -> float:
        return float(self.total.value[0, 0])


def quality_targets(outputs: list[LevelOutputs],
                    assignment: Assignment) -> list[np.ndarray]:
    """Per-level (C, T) quality maps: overlap of the current refined
    prediction with its target at the target class, zero elsewhere.
    These are constants in the loss; no gradient flows through them."""
    maps = []
    for out, assign in zip(outputs, assignment.levels):
        c, t = out.cls_refined.value.shape
        q_map = np.zeros((c, t))
        s_pred = out.start_refined.value[0]
        e_pred = out.end_refined.value[0]
        for i in np.flatnonzero(assign.pos_mask):
            q_map[assign.labels[i] - 1, i] = tiou(
                (s_pred[i], e_pred[i]), (assign.starts[i], assign.ends[i]))
        maps.append(q_map)
    return maps


def total_loss(outputs: list[LevelOutputs], assignment: Assignment,
               alpha: float = VFL_ALPHA, gamma: float = VFL_GAMMA,
               quality: list[np.ndarray] | None = None) -> LossBreakdown:
    """Combined loss over all levels of one sequence, on refined outputs.

    Positive instants: quality-weighted classification plus boundary IoU,
    normalised by the positive count; background instants: focal
    classification normalised by the background count.  Counts clamp at 1
    so empty sides stay harmless.  `quality` overrides the detached target
    maps (gradient checks freeze them at the base point).
    """
    if len(outputs) != len(assignment.levels):
        raise ValueError(f"{len(outputs)} output levels vs {len(assignment.levels)} assigned")
    if quality is None:
        quality = quality_targets(outputs, assignment)
    n_pos = max(assignment.num_pos, 1)
    n_neg = max(assignment.num_neg, 1)
    pos_sum = None
    neg_sum = None
    iou_sum = None
    for out, assign, q_map in zip(outputs, assignment.levels, quality):
        c, t = out.cls_refined.value.shape
        if assign.labels.shape[0] != t:
            raise ValueError(f"assignment length {assign.labels.shape[0]} vs outputs {t}")
        pos = assign.pos_mask

        vfl = varifocal_map(out.cls_refined, q_map, alpha, gamma)
        vfl_per_instant = ad.sum_axis(vfl, axis=0)

        sigma = q_map.max(axis=0, keepdims=True)  # per-instant quality weight
        pos_w = ad.const(sigma * pos[None, :].astype(np.float64))
        neg_w = ad.const((~pos)[None, :].astype(np.float64))
        lvl_pos = ad.sum_all(ad.mul(vfl_per_instant, pos_w))
        lvl_neg = ad.sum_all(ad.mul(vfl_per_instant, neg_w))

        pos_sum = lvl_pos if pos_sum is None else ad.add(pos_sum, lvl_pos)
        neg_sum = lvl_neg if neg_sum is None else ad.add(neg_sum, lvl_neg)

        if pos.any():
            iou_map = iou_loss_map(out.start_refined, out.end_refined,
                                   assign.starts, assign.ends)
            lvl_iou = ad.sum_all(ad.mul(iou_map, ad.const(pos[None, :].astype(np.float64))))
            iou_sum = lvl_iou if iou_sum is None else ad.add(iou_sum, lvl_iou)

    if iou_sum is None:
        iou_sum = ad.scalar(0.0)
    pos_part = ad.affine(ad.add(pos_sum, iou_sum), 1.0 / n_pos, 0.0)
    neg_part = ad.affine(neg_sum, 1.0 / n_neg, 0.0)
    total = ad.add(pos_part, neg_part)
    return LossBreakdown(
        total=total,
        vfl_pos=float(pos_sum.value[0, 0]) / n_pos,
        vfl_neg=float(neg_sum.value[0, 0]) / n_neg,
        iou=float(iou_sum.value[0, 0]) / n_pos,
        num_pos=assignment.num_pos,
        num_neg=assignment.num_neg,
    )
