"""Bipartite matching between predicted slots and targets, and the set loss.

Boxes are ``(cx, cy, w, h)``. The matching cost uses raw class probability,
the loss uses log-probability cross-entropy; both follow the usual
detection-transformer recipe with weights class 1, L1 5, GIoU 2 and a 0.1
weight on no-object slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class CostWeights:
    class_: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1

    def __post_init__(self):
        for name in ("class_", "l1", "giou", "no_object"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"cost weight {name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class GroundTruth:
    labels: tuple[int, ...]
    boxes: tuple[tuple[float, float, float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        object.__setattr__(self, "boxes", tuple(tuple(float(v) for v in b) for b in self.boxes))
        if len(self.labels) != len(self.boxes):
            raise ValueError(f"{len(self.labels)} labels but {len(self.boxes)} boxes")
        for b in self.boxes:
            if len(b) != 4:
                raise ValueError(f"box must have 4 entries, got {b}")
            cx, cy, w, h = b
            if w < 0 or h < 0 or cx - w / 2 < -1e-12 or cx + w / 2 > 1 + 1e-12 \
                    or cy - h / 2 < -1e-12 or cy + h / 2 > 1 + 1e-12:
                raise ValueError(f"box {b} is not inside the unit square")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def box_array(self) -> np.ndarray:
        return np.array(self.boxes, dtype=np.float64).reshape(-1, 4)

    @classmethod
    def from_scene(cls, scene) -> "GroundTruth":
        return cls(tuple(o.class_id for o in scene.objects), tuple(o.box for o in scene.objects))


@dataclass(frozen=True)
class Assignment:
    """Matched ``(prediction, target)`` pairs, sorted by prediction index."""

    pairs: tuple[tuple[int, int], ...]

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.intp)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.intp)

    def total_cost(self, cost) -> float:
        c = np.asarray(cost, dtype=np.float64)
        return math.fsum(c[p, t] for p, t in self.pairs)


# ---------------------------------------------------------------------------
# GIoU


def cxcywh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def pairwise_giou(a, b) -> np.ndarray:
    """GIoU matrix between boxes ``a`` (m, 4) and ``b`` (n, 4).

    A zero-area box has IoU 0 with everything; the hull then comes from the
    corners of both boxes. Two coincident zero-area boxes give 0.
    """
    A = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))[:, None, :]
    B = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))[None, :, :]
    area_a = (A[..., 2] - A[..., 0]) * (A[..., 3] - A[..., 1])
    area_b = (B[..., 2] - B[..., 0]) * (B[..., 3] - B[..., 1])
    iw = np.clip(np.minimum(A[..., 2], B[..., 2]) - np.maximum(A[..., 0], B[..., 0]), 0, None)
    ih = np.clip(np.minimum(A[..., 3], B[..., 3]) - np.maximum(A[..., 1], B[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = ((np.maximum(A[..., 2], B[..., 2]) - np.minimum(A[..., 0], B[..., 0]))
            * (np.maximum(A[..., 3], B[..., 3]) - np.minimum(A[..., 1], B[..., 1])))
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        penalty = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return iou - penalty


def giou(a, b) -> float:
    return float(pairwise_giou(a, b)[0, 0])


def pairwise_iou(a, b) -> np.ndarray:
    A = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))[:, None, :]
    B = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))[None, :, :]
    area_a = (A[..., 2] - A[..., 0]) * (A[..., 3] - A[..., 1])
    area_b = (B[..., 2] - B[..., 0]) * (B[..., 3] - B[..., 1])
    iw = np.clip(np.minimum(A[..., 2], B[..., 2]) - np.maximum(A[..., 0], B[..., 0]), 0, None)
    ih = np.clip(np.minimum(A[..., 3], B[..., 3]) - np.maximum(A[..., 1], B[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable GIoU between matching rows of ``pred`` (k, 4) and ``target`` (k, 4)."""
    tgt = cxcywh_to_xyxy(target)
    cols = [T.select_cols(pred, i, i + 1) for i in range(4)]
    cx, cy, w, h = cols
    half_w = T.scale(w, 0.5)
    half_h = T.scale(h, 0.5)
    px0, px1 = T.sub(cx, half_w), T.add(cx, half_w)
    py0, py1 = T.sub(cy, half_h), T.add(cy, half_h)
    tx0, ty0, tx1, ty1 = (Tensor(tgt[:, i:i + 1]) for i in range(4))
    iw = T.relu(T.sub(T.minimum(px1, tx1), T.maximum(px0, tx0)))
    ih = T.relu(T.sub(T.minimum(py1, ty1), T.maximum(py0, ty0)))
    inter = T.mul(iw, ih)
    area_t = Tensor((tgt[:, 2:3] - tgt[:, 0:1]) * (tgt[:, 3:4] - tgt[:, 1:2]))
    union = T.sub(T.add(T.mul(w, h), area_t), inter)
    hw = T.sub(T.maximum(px1, tx1), T.minimum(px0, tx0))
    hh = T.sub(T.maximum(py1, ty1), T.minimum(py0, ty0))
    hull = T.mul(hw, hh)
    iou = T.div(inter, union)
    return T.sub(iou, T.div(T.sub(hull, union), hull))


# ---------------------------------------------------------------------------
# matching


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_cost(pred, gt: GroundTruth, weights: CostWeights = CostWeights()) -> np.ndarray:
    """Cost matrix ``(Q, |gt|)`` for one scene.

    ``pred`` is a :class:`~mitilab.detr.DetectionOutput` for a single scene
    (or anything with ``class_logits`` and ``boxes``).
    """
    logits = np.asarray(getattr(pred.class_logits, "data", pred.class_logits), dtype=np.float64)
    boxes = np.asarray(getattr(pred.boxes, "data", pred.boxes), dtype=np.float64)
    if logits.ndim != 2 or boxes.ndim != 2:
        raise ValueError("match_cost expects a single scene; index the batch first")
    q = logits.shape[0]
    if len(gt) > q:
        raise ValueError(f"{len(gt)} targets but only {q} prediction slots")
    if len(gt) == 0:
        return np.zeros((q, 0))
    prob = _softmax(logits)
    labels = np.array(gt.labels, dtype=np.intp)
    tgt = gt.box_array
    cost_class = -prob[:, labels]
    cost_l1 = np.abs(boxes[:, None, :] - tgt[None, :, :]).sum(axis=-1)
    cost_giou = 1.0 - pairwise_giou(boxes, tgt)
    return weights.class_ * cost_class + weights.l1 * cost_l1 + weights.giou * cost_giou


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of all ``n`` columns to ``m >= n`` rows."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    m, n = c.shape
    if m < n:
        raise ValueError(f"need at least as many rows as columns, got {m}x{n}")
    if not np.all(np.isfinite(c)):
        bad = tuple(int(v) for v in np.argwhere(~np.isfinite(c))[0])
        raise ValueError(f"cost matrix has a non-finite entry at {bad}")
    if n == 0:
        return Assignment(())
    # solve with targets as rows so the kernel's rows <= cols contract holds
    row_of_target = kernels.linear_assignment(np.ascontiguousarray(c.T))
    pairs = sorted((int(r), t) for t, r in enumerate(row_of_target))
    return Assignment(tuple(pairs))


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    """Per-scene loss components as plain floats (for logging)."""

    total: np.ndarray
    class_ce: np.ndarray
    l1: np.ndarray
    giou: np.ndarray


def batch_set_loss(pred, gts: Sequence[GroundTruth], assignments: Sequence[Assignment],
                   weights: CostWeights = CostWeights()) -> tuple[Tensor, LossParts]:
    """Mean over scenes of the per-scene set loss, plus per-scene parts.

    Per scene: class cross-entropy averaged with weight 1 on matched slots and
    ``weights.no_object`` on the rest, plus L1 and ``1 - GIoU`` summed over
    matched pairs and divided by ``max(1, |gt|)``.
    """
    logits, boxes = pred.class_logits, pred.boxes
    single = logits.data.ndim == 2
    if single:
        logits = T.reshape(logits, (1,) + logits.shape)
        boxes = T.reshape(boxes, (1,) + boxes.shape)
    B, Q, K = logits.shape
    if len(gts) != B or len(assignments) != B:
        raise ValueError(f"batch of {B} but {len(gts)} targets and {len(assignments)} assignments")
    target_cls = np.full((B, Q), K - 1, dtype=np.intp)
    w_cls = np.full((B, Q), weights.no_object)
    flat_pred, tgt_boxes, pair_scene, pair_coef = [], [], [], []
    for b, (gt, a) in enumerate(zip(gts, assignments)):
        if len(a.pairs) != len(gt):
            raise ValueError(f"scene {b}: assignment covers {len(a.pairs)} of {len(gt)} targets")
        nb = max(1, len(gt))
        for p, t in a.pairs:
            target_cls[b, p] = gt.labels[t]
            w_cls[b, p] = 1.0
            flat_pred.append(b * Q + p)
            tgt_boxes.append(gt.boxes[t])
            pair_scene.append(b)
            pair_coef.append(1.0 / (nb * B))
    norm = w_cls.sum(axis=1, keepdims=True)
    nll = T.neg(T.gather_last(T.log_softmax_rows(logits), target_cls))
    ce_coef = weights.class_ * w_cls / norm / B
    loss = T.sum_(T.mul(nll, Tensor(ce_coef)))
    ce_scene = (nll.data * w_cls).sum(axis=1) / norm[:, 0]
    l1_scene = np.zeros(B)
    giou_scene = np.zeros(B)
    if flat_pred:
        coef = np.array(pair_coef)[:, None]
        sel = T.take_rows(boxes, flat_pred)
        tgt = np.array(tgt_boxes)
        l1 = T.abs_(T.sub(sel, Tensor(tgt)))
        loss = T.add(loss, T.sum_(T.mul(l1, Tensor(np.repeat(coef * weights.l1, 4, axis=1)))))
        g = giou_tensor(sel, tgt)
        one_minus = T.sub(Tensor(np.ones_like(g.data)), g)
        loss = T.add(loss, T.sum_(T.mul(one_minus, Tensor(coef * weights.giou))))
        scene_idx = np.array(pair_scene)
        counts = np.array([max(1, len(gt)) for gt in gts], dtype=np.float64)
        l1_scene = np.bincount(scene_idx, l1.data.sum(axis=1), minlength=B) / counts
        giou_scene = np.bincount(scene_idx, one_minus.data[:, 0], minlength=B) / counts
    total = weights.class_ * ce_scene + weights.l1 * l1_scene + weights.giou * giou_scene
    return loss, LossParts(total, ce_scene, l1_scene, giou_scene)


def set_loss(pred, gt: GroundTruth, assignment: Assignment,
             weights: CostWeights = CostWeights()) -> Tensor:
    """Set loss for a single scene; differentiable through ``pred``."""
    loss, _ = batch_set_loss(pred, [gt], [assignment], weights)
    return loss
