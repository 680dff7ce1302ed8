"""COCO-style box AP/AR on unit-coordinate detections.

Matching follows the reference COCO evaluator: per class and IoU threshold,
detections are taken in descending confidence and greedily matched to the
best still-free ground truth; precision is made monotone and sampled at 101
recall points. Ground truths outside the area range are "ignored": matching
one neither helps nor hurts, and unmatched detections outside the range are
dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import CANVAS
from .matching import GroundTruth, pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}
MAX_DETECTIONS = 100


@dataclass
class Detections:
    scores: np.ndarray  # (k,)
    labels: np.ndarray  # (k,) int
    boxes: np.ndarray  # (k, 4) cx, cy, w, h

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if not len(self.scores) == len(self.labels) == len(self.boxes):
            raise ValueError("scores, labels and boxes must have equal length")

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros(0), np.zeros(0, dtype=np.intp), np.zeros((0, 4)))

    @classmethod
    def from_ground_truth(cls, gt: GroundTruth) -> "Detections":
        return cls(np.ones(len(gt)), np.array(gt.labels, dtype=np.intp), gt.box_array)


def detections_from_output(class_logits, boxes) -> Detections:
    """Score each slot by its best real-class probability (no-object excluded)."""
    logits = np.asarray(getattr(class_logits, "data", class_logits), dtype=np.float64)
    b = np.asarray(getattr(boxes, "data", boxes), dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    real = p[:, :-1]
    return Detections(real.max(axis=1), real.argmax(axis=1), b)


@dataclass
class APResult:
    ap: float
    ar: float
    per_threshold_ap: dict


def _box_area(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, 2] * boxes[:, 3] * CANVAS * CANVAS


def _match_image(det_boxes, gt_boxes, gt_ignore, thresholds):
    """Greedy matching for one image and class; detections already score-sorted.

    Returns ``(matched, det_ignore)`` arrays of shape ``(len(thresholds), k)``.
    """
    k = len(det_boxes)
    matched = np.zeros((len(thresholds), k), dtype=bool)
    det_ignore = np.zeros((len(thresholds), k), dtype=bool)
    if k == 0 or len(gt_boxes) == 0:
        return matched, det_ignore
    ious = pairwise_iou(det_boxes, gt_boxes)
    for ti, t in enumerate(thresholds):
        gt_taken = np.zeros(len(gt_boxes), dtype=bool)
        for d in range(k):
            best = min(t, 1 - 1e-10)
            m = -1
            for g in range(len(gt_boxes)):
                if gt_taken[g]:
                    continue
                # gts are sorted with non-ignored first: stop once we would
                # trade a real match for an ignored one
                if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                    break
                if ious[d, g] < best:
                    continue
                best = ious[d, g]
                m = g
            if m == -1:
                continue
            gt_taken[m] = True
            matched[ti, d] = True
            det_ignore[ti, d] = gt_ignore[m]
    return matched, det_ignore


def _ap_from_pr(tp: np.ndarray, fp: np.ndarray, n_pos: int) -> tuple[float, float]:
    tp_sum = np.cumsum(tp).astype(np.float64)
    fp_sum = np.cumsum(fp).astype(np.float64)
    if len(tp_sum) == 0:
        return 0.0, 0.0
    recall = tp_sum / n_pos
    precision = tp_sum / np.maximum(tp_sum + fp_sum, np.finfo(np.float64).eps)
    # monotone envelope, right to left
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean()), float(recall[-1])


def evaluate_ap(preds: Sequence[Detections], gts: Sequence[GroundTruth],
                iou_thresholds: Sequence[float] = COCO_THRESHOLDS, area: str = "all",
                class_agnostic: bool = False) -> APResult:
    """AP averaged over IoU thresholds and classes, and AR as mean max recall.

    Classes without any in-range ground truth are skipped. If no class has
    any, both values are ``nan``.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets but {len(gts)} ground truths")
    thresholds = tuple(float(t) for t in iou_thresholds)
    if not thresholds or not all(0.0 < t < 1.0 for t in thresholds):
        raise ValueError(f"IoU thresholds must lie in (0, 1), got {thresholds}")
    lo, hi = AREA_RANGES[area]

    def labels_of(x):
        lab = np.asarray(x, dtype=np.intp)
        return np.zeros_like(lab) if class_agnostic else lab

    classes = sorted({int(c) for g in gts for c in labels_of(g.labels)})
    ap_table = np.full((len(thresholds), len(classes)), np.nan)
    ar_table = np.full((len(thresholds), len(classes)), np.nan)
    for ci, c in enumerate(classes):
        scores_all, matched_all, ignore_all = [], [], []
        n_pos = 0
        for det, gt in zip(preds, gts):
            g_sel = labels_of(gt.labels) == c
            g_boxes = gt.box_array[g_sel]
            g_area = _box_area(g_boxes)
            g_ignore = (g_area < lo) | (g_area > hi)
            order = np.argsort(g_ignore, kind="mergesort")
            g_boxes, g_ignore = g_boxes[order], g_ignore[order]
            n_pos += int((~g_ignore).sum())
            d_sel = labels_of(det.labels) == c
            d_scores = det.scores[d_sel]
            d_boxes = det.boxes[d_sel]
            d_order = np.argsort(-d_scores, kind="mergesort")[:MAX_DETECTIONS]
            d_scores, d_boxes = d_scores[d_order], d_boxes[d_order]
            matched, d_ignore = _match_image(d_boxes, g_boxes, g_ignore, thresholds)
            d_area = _box_area(d_boxes)
            out_of_range = (d_area < lo) | (d_area > hi)
            d_ignore |= ~matched & out_of_range[None, :]
            scores_all.append(d_scores)
            matched_all.append(matched)
            ignore_all.append(d_ignore)
        if n_pos == 0:
            continue
        scores = np.concatenate(scores_all)
        order = np.argsort(-scores, kind="mergesort")
        matched = np.concatenate(matched_all, axis=1)[:, order]
        ignore = np.concatenate(ignore_all, axis=1)[:, order]
        for ti in range(len(thresholds)):
            tp = matched[ti] & ~ignore[ti]
            fp = ~matched[ti] & ~ignore[ti]
            ap_table[ti, ci], ar_table[ti, ci] = _ap_from_pr(tp, fp, n_pos)
    if np.all(np.isnan(ap_table)):
        return APResult(float("nan"), float("nan"), {t: float("nan") for t in thresholds})
    per_t = {t: float(np.nanmean(ap_table[ti])) for ti, t in enumerate(thresholds)}
    return APResult(float(np.nanmean(ap_table)), float(np.nanmean(ar_table)), per_t)


AP_COLUMNS = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR")


def coco_summary(preds: Sequence[Detections], gts: Sequence[GroundTruth],
                 class_agnostic: bool = False) -> dict[str, float]:
    """The six AP columns of a standard detection table, plus AR."""
    full = evaluate_ap(preds, gts, class_agnostic=class_agnostic)
    return {
        "AP": full.ap,
        "AP50": full.per_threshold_ap[0.5],
        "AP75": full.per_threshold_ap[0.75],
        "AP_S": evaluate_ap(preds, gts, area="small", class_agnostic=class_agnostic).ap,
        "AP_M": evaluate_ap(preds, gts, area="medium", class_agnostic=class_agnostic).ap,
        "AP_L": evaluate_ap(preds, gts, area="large", class_agnostic=class_agnostic).ap,
        "AR": full.ar,
    }
