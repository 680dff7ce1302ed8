import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitilab.matching import GroundTruth
from mitilab.metrics import (
    AP_COLUMNS,
    Detections,
    coco_summary,
    detections_from_output,
    evaluate_ap,
)

GTS = [
    GroundTruth((0, 1), ((0.3, 0.3, 0.2, 0.2), (0.7, 0.6, 0.3, 0.1))),
    GroundTruth((1,), ((0.5, 0.5, 0.04, 0.04),)),
    GroundTruth((0, 0, 2), ((0.2, 0.7, 0.1, 0.1), (0.6, 0.3, 0.5, 0.4), (0.8, 0.8, 0.2, 0.2))),
]


def test_perfect_predictions_score_one():
    preds = [Detections.from_ground_truth(g) for g in GTS]
    res = evaluate_ap(preds, GTS)
    assert res.ap == 1.0 and res.ar == 1.0
    summary = coco_summary(preds, GTS)
    assert tuple(summary) == AP_COLUMNS
    assert summary["AP50"] == summary["AP75"] == 1.0


def test_no_predictions_score_zero():
    res = evaluate_ap([Detections.empty() for _ in GTS], GTS)
    assert res.ap == 0.0 and res.ar == 0.0


def test_hand_computed_precision_recall_curve():
    gt = GroundTruth((0, 0), ((0.25, 0.25, 0.3, 0.3), (0.75, 0.75, 0.3, 0.3)))
    preds = Detections(
        scores=[0.9, 0.8, 0.7],
        labels=[0, 0, 0],
        boxes=[(0.25, 0.25, 0.3, 0.3), (0.5, 0.2, 0.1, 0.1), (0.75, 0.75, 0.3, 0.3)],
    )
    res = evaluate_ap([preds], [gt], iou_thresholds=(0.5,))
    # TP, FP, TP: envelope precision 1 up to recall 0.5, then 2/3
    assert res.ap == pytest.approx((51 * 1.0 + 50 * (2.0 / 3.0)) / 101, rel=1e-12)
    assert res.ar == 1.0


def test_duplicate_detection_is_a_false_positive():
    gt = GroundTruth((0,), ((0.5, 0.5, 0.4, 0.4),))
    preds = Detections([0.9, 0.95], [0, 0], [(0.5, 0.5, 0.4, 0.4), (0.5, 0.5, 0.4, 0.4)])
    res = evaluate_ap([preds], [gt], iou_thresholds=(0.5,))
    assert res.ap == 1.0
    worse = Detections([0.9, 0.95], [0, 0], [(0.5, 0.5, 0.4, 0.4), (0.1, 0.1, 0.1, 0.1)])
    assert evaluate_ap([worse], [gt], iou_thresholds=(0.5,)).ap == pytest.approx(0.5, rel=1e-12)


def test_wrong_class_does_not_match():
    gt = GroundTruth((0,), ((0.5, 0.5, 0.4, 0.4),))
    preds = Detections([0.9], [1], [(0.5, 0.5, 0.4, 0.4)])
    assert evaluate_ap([preds], [gt]).ap == 0.0
    assert evaluate_ap([preds], [gt], class_agnostic=True).ap == 1.0


def test_area_ranges_split_small_and_large():
    preds = [Detections.from_ground_truth(g) for g in GTS]
    summary = coco_summary(preds, GTS)
    assert summary["AP_S"] == 1.0 and summary["AP_L"] == 1.0
    gt = GroundTruth((0,), ((0.5, 0.5, 0.5, 0.5),))
    assert np.isnan(evaluate_ap([Detections.empty()], [gt], area="small").ap)


def test_input_validation():
    with pytest.raises(ValueError):
        evaluate_ap([Detections.empty()], GTS)
    with pytest.raises(ValueError):
        evaluate_ap([Detections.empty()], GTS[:1], iou_thresholds=(1.0,))
    with pytest.raises(ValueError):
        Detections([0.5], [0, 1], [(0.5, 0.5, 0.1, 0.1)])


def test_detections_from_output_excludes_no_object():
    logits = np.array([[0.0, 1.0, 5.0], [2.0, 0.0, 0.0]])
    det = detections_from_output(logits, np.full((2, 4), 0.5))
    np.testing.assert_array_equal(det.labels, [1, 0])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(det.scores, [p[0, 1], p[1, 0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_is_invariant_to_prediction_order(seed):
    rng = np.random.default_rng(seed)
    preds = []
    for g in GTS:
        k = int(rng.integers(0, 6))
        boxes = np.column_stack([rng.uniform(0.2, 0.8, (k, 2)), rng.uniform(0.02, 0.4, (k, 2))])
        if len(g):
            boxes = np.vstack([boxes, g.box_array + rng.normal(scale=0.02, size=g.box_array.shape)])
        n = len(boxes)
        preds.append(Detections(rng.permutation(n) / n + 0.01, rng.integers(0, 3, n), boxes))
    base = evaluate_ap(preds, GTS)
    shuffled = []
    for d in preds:
        p = rng.permutation(len(d.scores))
        shuffled.append(Detections(d.scores[p], d.labels[p], d.boxes[p]))
    again = evaluate_ap(shuffled, GTS)
    assert again.ap == base.ap and again.ar == base.ar
    assert 0.0 <= base.ap <= 1.0 and 0.0 <= base.ar <= 1.0
