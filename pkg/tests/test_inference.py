from types import SimpleNamespace

import numpy as np
import pytest
import torch

from wsis.inference import (MASK_SOURCES, default_mask_source, detect,
                            ensemble_mask, load_predictions, paste_mask,
                            predict_instances, snap_to_segment_proposal,
                            write_predictions)
from wsis.inference import InstancePrediction


class StubModel:
    """Drives the inference pipeline with hand-chosen head outputs."""

    def __init__(self, refine, regressor, num_classes=2, mask_size=4,
                 cams=None, seg=None):
        self.config = SimpleNamespace(num_classes=num_classes,
                                      mask_size=mask_size)
        self._refine = [torch.as_tensor(r, dtype=torch.float64) for r in refine]
        self._reg = torch.as_tensor(regressor, dtype=torch.float64)
        self._cams = cams
        self._seg = seg

    def extract_features(self, chw):
        return chw

    def pool_proposals(self, feats, boxes, include_img=True, include_det=True):
        return SimpleNamespace(det=len(boxes), img=len(boxes))

    def det_trunk(self, pooled):
        return pooled

    def detection_forward(self, trunk):
        return SimpleNamespace(refine=self._refine, regressor=self._reg)

    def img_forward(self, pooled):
        return SimpleNamespace(cams=torch.as_tensor(self._cams, dtype=torch.float64))

    def seg_forward(self, trunk):
        return SimpleNamespace(probs=torch.as_tensor(self._seg, dtype=torch.float64))


IMAGE = np.zeros((64, 64, 3), dtype=np.float32)

# four proposals: 0 and 1 overlap heavily, 2 is separate, 3 is elsewhere
BOXES = np.array([[0, 0, 10, 10],
                  [1, 1, 11, 11],
                  [30, 30, 40, 40],
                  [50, 50, 60, 60]], dtype=np.float64)


def scores_fixture():
    # branch average: rows -> (cat0, cat1, bg)
    avg = np.array([[0.80, 0.10, 0.10],
                    [0.60, 0.20, 0.20],
                    [0.20, 0.70, 0.10],
                    [0.10, 0.10, 0.80]])
    spread = 0.05 * np.array([[1, 0, -1]] * 4)
    return [avg - spread, avg, avg + spread]     # same mean, distinct branches


def test_detect_hand_traced_pipeline():
    model = StubModel(scores_fixture(), np.zeros((4, 4)))
    dets = detect(model, IMAGE, BOXES, apply_regression=False)
    # row 3 argmax is background; row 1 (cat 0) is NMS-suppressed by row 0
    assert [(cat, pidx) for _, cat, _, pidx in dets] == [(0, 0), (1, 2)]
    assert [round(s, 6) for _, _, s, _ in dets] == [0.8, 0.7]
    np.testing.assert_array_equal(dets[0][0], BOXES[0])
    np.testing.assert_array_equal(dets[1][0], BOXES[2])


def test_detect_applies_class_agnostic_regression():
    reg = np.zeros((4, 4))
    reg[0] = [0.1, 0.0, 0.0, 0.0]                # shift box 0 right by one width-tenth
    model = StubModel(scores_fixture(), reg)
    dets = detect(model, IMAGE, BOXES, apply_regression=True)
    np.testing.assert_allclose(dets[0][0], [1.0, 0.0, 11.0, 10.0], atol=1e-12)


def test_detect_applies_class_specific_regression_slice():
    reg = np.zeros((4, 12))                      # 4 offsets per category plus bg
    reg[2, 4:8] = [0.0, 0.1, 0.0, 0.0]           # category-1 slice shifts down
    model = StubModel(scores_fixture(), reg)
    dets = detect(model, IMAGE, BOXES, apply_regression=True)
    assert dets[1][1] == 1
    np.testing.assert_allclose(dets[1][0], [30.0, 31.0, 40.0, 41.0], atol=1e-12)


def test_detect_score_floor_and_all_background():
    low = [np.array([[0.005, 0.001, 0.004]] * 4)] * 3
    model = StubModel(low, np.zeros((4, 4)))
    assert detect(model, IMAGE, BOXES) == []     # floored away
    bg = [np.array([[0.1, 0.1, 0.8]] * 4)] * 3
    model = StubModel(bg, np.zeros((4, 4)))
    assert detect(model, IMAGE, BOXES) == []     # argmax background everywhere


def test_ensemble_mask_boundaries():
    m = np.array([[1.0, 0.4, 0.0]])
    s = np.array([[0.0, 0.4, 0.0]])
    np.testing.assert_array_equal(ensemble_mask(m, s), [[1, 0, 0]])
    # avg(1,0) = 0.5 > 0.4 -> on; avg(0.4,0.4) = 0.4 -> off (strict); zeros off


def test_paste_mask_checkerboard():
    grid = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    out = paste_mask(grid, np.array([0.0, 0.0, 4.0, 4.0]), (8, 8))
    want = np.zeros((8, 8), dtype=bool)
    want[0:2, 0:2] = True
    want[2:4, 2:4] = True
    np.testing.assert_array_equal(out, want)


def test_paste_mask_fractional_box_and_clipping():
    grid = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    out = paste_mask(grid, np.array([0.5, 0.5, 2.5, 2.5]), (4, 4))
    want = np.array([[1, 0, 0, 0],
                     [0, 1, 1, 0],
                     [0, 1, 1, 0],
                     [0, 0, 0, 0]], dtype=bool)
    np.testing.assert_array_equal(out, want)
    # box partly outside the canvas keeps only the inside portion
    out = paste_mask(np.ones((2, 2), np.uint8), np.array([-2.0, -2.0, 2.0, 2.0]), (4, 4))
    assert out[:2, :2].all() and out.sum() == 4
    # degenerate box -> empty
    assert paste_mask(grid, np.array([3.0, 3.0, 3.0, 5.0]), (8, 8)).sum() == 0


def test_snap_to_segment_proposal():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0:4, 0:4] = True
    near = np.zeros((8, 8), dtype=bool)
    near[0:4, 0:3] = True                        # IoU 0.75
    far = np.zeros((8, 8), dtype=bool)
    far[6:8, 6:8] = True                         # IoU 0
    np.testing.assert_array_equal(snap_to_segment_proposal(mask, [far, near]), near)
    np.testing.assert_array_equal(snap_to_segment_proposal(mask, [far]), mask)
    np.testing.assert_array_equal(snap_to_segment_proposal(mask, []), mask)
    np.testing.assert_array_equal(snap_to_segment_proposal(mask, None), mask)


def test_default_mask_source_follows_trained_heads():
    assert default_mask_source(None) == "ensemble"
    assert default_mask_source({"enable_img": False}) == "box"
    assert default_mask_source({"enable_img": True, "enable_seg": False}) == "cam"
    assert default_mask_source({"enable_img": True, "enable_seg": True}) == "ensemble"


def make_map_model():
    """Stub whose two detections get constant CAM/seg channels."""
    t = 4
    # detections will be (cat 0, proposal 0) and (cat 1, proposal 2)
    cams = np.zeros((2, 2, 3, t, t))             # (branches, N, C+1, T, T)
    cams[:, 0, 0, :, :2] = 1.0                   # det 0, channel 0: left half hot
    cams[:, 1, 1, :2, :] = 1.0                   # det 1, channel 1: top half hot
    seg = np.zeros((2, 3, t, t))
    seg[0, 0, :, :1] = 1.0                       # det 0: left quarter
    seg[1, 1] = 0.45                             # det 1: uniformly just above 0.4
    return StubModel(scores_fixture(), np.zeros((4, 4)), cams=cams, seg=seg)


def test_predict_instances_sources_and_grids():
    model = make_map_model()
    out = predict_instances(model, IMAGE, BOXES, sources=MASK_SOURCES,
                            apply_regression=False)
    assert set(out) == set(MASK_SOURCES)
    for src in MASK_SOURCES:
        assert [p.category for p in out[src]] == [0, 1]
        assert [p.proposal_index for p in out[src]] == [0, 2]

    box_p, cam_p, seg_p, ens_p = (out["box"][0], out["cam"][0],
                                  out["seg"][0], out["ensemble"][0])
    assert box_p.mask_grid.all()                           # box source fills TxT
    np.testing.assert_array_equal(cam_p.mask_grid[:, :2], 1)
    np.testing.assert_array_equal(cam_p.mask_grid[:, 2:], 0)
    np.testing.assert_array_equal(seg_p.mask_grid[:, :1], 1)
    np.testing.assert_array_equal(seg_p.mask_grid[:, 1:], 0)
    # ensemble: left quarter avg 1.0, second quarter avg 0.5 -> on; right half off
    np.testing.assert_array_equal(ens_p.mask_grid[:, :2], 1)
    np.testing.assert_array_equal(ens_p.mask_grid[:, 2:], 0)
    # pasted mask lives only inside the detection box
    full = ens_p.mask
    assert full.shape == (64, 64)
    assert full[:10, :5].all() and full[:, 5:].sum() == 0 and full[10:].sum() == 0

    # det 1 seg channel is 0.45 everywhere: seg mask full, ensemble (0.45+.5)/2>0.4
    assert out["seg"][1].mask_grid.all()
    np.testing.assert_array_equal(out["ensemble"][1].mask_grid[:2], 1)
    np.testing.assert_array_equal(out["ensemble"][1].mask_grid[2:], 0)


def test_predict_instances_rejects_unknown_source_and_empty():
    model = make_map_model()
    with pytest.raises(ValueError):
        predict_instances(model, IMAGE, BOXES, sources=("blob",))
    low = StubModel([np.array([[0.1, 0.1, 0.8]] * 4)] * 3, np.zeros((4, 4)))
    out = predict_instances(low, IMAGE, BOXES, sources=("box",))
    assert out == {"box": []}


def test_predictions_file_roundtrip(tmp_path):
    mask = np.zeros((64, 64), dtype=bool)
    mask[10:20, 10:20] = True
    preds = [
        ("img_a", [InstancePrediction(1, 0.75, np.array([10.0, 10, 20, 20]),
                                      mask, None, 3)]),
        ("img_b", []),
    ]
    path = tmp_path / "predictions.jsonl"
    write_predictions(preds, path)
    loaded = load_predictions(path)
    assert set(loaded) == {"img_a", "img_b"}
    inst = loaded["img_a"][0]
    assert inst["category"] == 1 and inst["score"] == 0.75
    np.testing.assert_allclose(inst["box"], [10, 10, 20, 20])
    from wsis.masks import rle_decode
    np.testing.assert_array_equal(rle_decode(inst["mask_rle"], (64, 64)), mask)
    assert loaded["img_b"] == []


def test_load_predictions_validation_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("not json\n")
    with pytest.raises(ValueError, match="invalid JSON"):
        load_predictions(p)
    p.write_text('{"id": "a"}\n')
    with pytest.raises(ValueError, match="missing"):
        load_predictions(p)
    p.write_text('{"id": "a", "instances": [{"category": 1, "score": 0.5}]}\n')
    with pytest.raises(ValueError, match="missing 'box'"):
        load_predictions(p)
    p.write_text('{"id": "a", "instances": [{"category": 1, "score": 0.5, "box": [1, 2]}]}\n')
    with pytest.raises(ValueError, match="4 numbers"):
        load_predictions(p)
