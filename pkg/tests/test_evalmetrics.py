import numpy as np
import pytest

from wsis.evalmetrics import (EvalInstance, abo, average_precision, corloc,
                              evaluate, match_predictions)
from wsis.synthdata import GroundTruthInstance

from conftest import random_boxes
from oracles import average_precision_ref, iou_ref, match_predictions_ref


def box_mask(box, size=16):
    m = np.zeros((size, size), dtype=bool)
    x1, y1, x2, y2 = [int(v) for v in box]
    m[y1:y2, x1:x2] = True
    return m


def make_gt(per_image):
    return {img: [GroundTruthInstance(c, np.asarray(b, dtype=float), box_mask(b))
                  for c, b in lst] for img, lst in per_image.items()}


def test_ap_hand_fixture_five_sixths():
    """Single category, 2 GT, 3 predictions ranked TP, TP, FP.

    precision at recall points: 1/1, 2/2; all-point AP = 0.5*1 + 0.5*1 = 1.0
    needs an FP between: ranked TP, FP, TP -> AP = 0.5*1 + 0.5*(2/3) = 5/6.
    """
    gt = make_gt({"a": [(0, (0, 0, 8, 8)), (0, (8, 8, 16, 16))]})
    preds = {"a": [
        EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 8]), box_mask((0, 0, 8, 8))),
        EvalInstance("a", 0, 0.8, np.array([0.0, 8, 8, 16]), box_mask((0, 8, 8, 16))),  # FP
        EvalInstance("a", 0, 0.7, np.array([8.0, 8, 16, 16]), box_mask((8, 8, 16, 16))),
    ]}
    rep = evaluate(preds, gt, num_classes=1, iou_thresholds=(0.5,), modes=("box",))
    assert rep.ap["box"]["0.5"]["per_category"]["0"] == pytest.approx(5 / 6)
    assert rep.ap["box"]["0.5"]["mean"] == pytest.approx(5 / 6)


def test_ap_empty_category_is_excluded():
    gt = make_gt({"a": [(0, (0, 0, 8, 8))]})
    preds = {"a": [EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 8]))]}
    rep = evaluate(preds, gt, num_classes=3, iou_thresholds=(0.5,), modes=("box",))
    per = rep.ap["box"]["0.5"]["per_category"]
    assert per["0"] == pytest.approx(1.0)
    assert per["1"] is None and per["2"] is None
    assert rep.ap["box"]["0.5"]["mean"] == pytest.approx(1.0)   # mean over non-None


def test_ap_no_predictions_is_zero():
    gt = make_gt({"a": [(0, (0, 0, 8, 8))]})
    rep = evaluate({}, gt, num_classes=1, iou_thresholds=(0.5,), modes=("box",))
    assert rep.ap["box"]["0.5"]["per_category"]["0"] == 0.0


def test_matching_claims_each_gt_once():
    gt = make_gt({"a": [(0, (0, 0, 8, 8))]})
    preds = {"a": [
        EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 8])),
        EvalInstance("a", 0, 0.8, np.array([0.0, 0, 8, 8])),   # duplicate -> FP
    ]}
    rep = evaluate(preds, gt, num_classes=1, iou_thresholds=(0.5,), modes=("box",))
    assert rep.ap["box"]["0.5"]["per_category"]["0"] == pytest.approx(1.0)


def test_matching_matches_oracle_random(rng):
    for _ in range(120):
        n_img = int(rng.integers(1, 4))
        gts = {}
        preds = []
        for i in range(n_img):
            img = f"im{i}"
            g = int(rng.integers(0, 4))
            gts[img] = [row for row in random_boxes(rng, g, size=32, min_side=3)]
            for b in random_boxes(rng, int(rng.integers(0, 5)), size=32, min_side=3):
                preds.append((img, float(rng.random()), b))
        order, flags_ref = match_predictions_ref(preds, gts, iou_ref, 0.5)
        eval_sorted = [EvalInstance(preds[i][0], 0, preds[i][1], preds[i][2])
                       for i in order]
        gt_objs = {img: [GroundTruthInstance(0, b, box_mask(b, 32)) for b in lst]
                   for img, lst in gts.items()}
        flags = match_predictions(eval_sorted, gt_objs, 0.5, "box")
        assert [bool(f) for f in flags] == flags_ref


def test_ap_matches_reference_random(rng):
    for _ in range(200):
        n = int(rng.integers(1, 12))
        flags = rng.random(n) < 0.5
        num_gt = int(rng.integers(1, 8))
        got = average_precision(flags, num_gt)
        want = average_precision_ref(list(flags), num_gt)
        assert got == pytest.approx(want, abs=1e-12)
    assert average_precision(np.array([], dtype=bool), 0) is None
    assert average_precision(np.array([], dtype=bool), 3) == 0.0


def test_ap_invariant_under_monotone_rescale(rng):
    gt = make_gt({"a": [(0, (0, 0, 8, 8)), (0, (8, 8, 16, 16))]})
    boxes = [(0.0, 0, 8, 8), (0.0, 8, 8, 16), (8.0, 8, 16, 16), (2.0, 2, 10, 10)]
    scores = [0.9, 0.5, 0.4, 0.2]
    def run(ss):
        preds = {"a": [EvalInstance("a", 0, s, np.array(b))
                       for s, b in zip(ss, boxes)]}
        rep = evaluate(preds, gt, num_classes=1, iou_thresholds=(0.5,), modes=("box",))
        return rep.ap["box"]["0.5"]["mean"]
    assert run(scores) == pytest.approx(run([s * 10 + 3 for s in scores]))


def test_duplicate_tp_lower_score_never_raises_ap():
    gt = make_gt({"a": [(0, (0, 0, 8, 8)), (0, (8, 8, 16, 16))]})
    base = [
        EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 8])),
        EvalInstance("a", 0, 0.5, np.array([0.0, 8, 8, 16])),
        EvalInstance("a", 0, 0.4, np.array([8.0, 8, 16, 16])),
    ]
    def ap_of(preds):
        rep = evaluate({"a": preds}, gt, num_classes=1,
                       iou_thresholds=(0.5,), modes=("box",))
        return rep.ap["box"]["0.5"]["mean"]
    with_dup = base + [EvalInstance("a", 0, 0.1, np.array([0.0, 0, 8, 8]))]
    assert ap_of(with_dup) <= ap_of(base) + 1e-12


def test_corloc_hand_fixture():
    # 4 (image, category) pairs; only image a / category 0 succeeds
    gt = make_gt({
        "a": [(0, (0, 0, 8, 8)), (1, (8, 8, 16, 16))],
        "b": [(0, (0, 0, 8, 8))],
        "c": [(1, (4, 4, 12, 12))],
    })
    preds = {
        "a": [EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 8])),      # hit
              EvalInstance("a", 1, 0.8, np.array([0.0, 0, 8, 8]))],     # miss
        "b": [EvalInstance("b", 0, 0.3, np.array([0.0, 0, 8, 8])),      # would hit
              EvalInstance("b", 0, 0.9, np.array([8.0, 8, 16, 16]))],   # but top misses
        "c": [],
    }
    assert corloc(preds, gt) == pytest.approx(1 / 4)


def test_abo_hand_fixture():
    m1 = box_mask((0, 0, 8, 8))
    m2 = box_mask((8, 8, 16, 16))
    gt = {"a": [GroundTruthInstance(0, np.array([0.0, 0, 8, 8]), m1),
                GroundTruthInstance(0, np.array([8.0, 8, 16, 16]), m2)]}
    half = box_mask((0, 0, 8, 4))                   # IoU 0.5 with m1
    preds = {"a": [EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 4]), half),
                   EvalInstance("a", 0, 0.8, np.array([8.0, 8, 16, 16]), m2)]}
    # best overlaps: 0.5 and 1.0 -> category mean 0.75
    assert abo(preds, gt) == pytest.approx(0.75)


def test_evaluate_rejects_unknown_image():
    gt = make_gt({"a": [(0, (0, 0, 8, 8))]})
    preds = {"zzz": [EvalInstance("zzz", 0, 0.9, np.array([0.0, 0, 8, 8]))]}
    with pytest.raises(ValueError):
        evaluate(preds, gt, num_classes=1)


def test_mask_mode_requires_masks_and_reports_abo():
    gt = make_gt({"a": [(0, (0, 0, 8, 8))]})
    preds = {"a": [EvalInstance("a", 0, 0.9, np.array([0.0, 0, 8, 8]),
                                box_mask((0, 0, 8, 8)))]}
    rep = evaluate(preds, gt, num_classes=1, iou_thresholds=(0.5,),
                   modes=("mask", "box"))
    assert rep.ap["mask"]["0.5"]["mean"] == pytest.approx(1.0)
    assert rep.abo == pytest.approx(1.0)
    d = rep.to_dict()
    assert d["ap"]["mask"]["0.5"]["mean"] == pytest.approx(1.0)
