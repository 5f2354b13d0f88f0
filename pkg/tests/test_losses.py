import math

import numpy as np
import pytest
import torch

from wsis.losses import (cam_loss, cam_loss_logits, classification_loss,
                         refinement_loss, refinement_loss_logits,
                         regression_loss, segmentation_loss,
                         segmentation_loss_logits, total_loss)
from wsis.pseudolabel import RefineTargets, RegressionTargets


def fd_check(fn, x, rel_tol=1e-4, h=1e-5):
    """Central finite differences vs autograd on a float64 leaf tensor."""
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    flat = x.detach().reshape(-1)
    num = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x.detach().reshape(x.shape)).item()
        flat[i] = orig - h
        dn = fn(x.detach().reshape(x.shape)).item()
        flat[i] = orig
        num[i] = (up - dn) / (2 * h)
    num = num.reshape(x.shape)
    denom = torch.clamp(grad.abs() + num.abs(), min=1e-8)
    rel = ((grad - num).abs() / denom).max().item()
    assert rel < rel_tol, f"max relative gradient error {rel}"


def test_classification_loss_value():
    phi = torch.tensor([0.5, 0.5], dtype=torch.float64)
    y = np.array([1.0, 0.0])
    assert classification_loss(phi, y).item() == pytest.approx(2 * math.log(2))


def test_classification_loss_gradient():
    y = np.array([1.0, 0.0, 1.0])
    phi = torch.tensor([0.3, 0.6, 0.8])
    fd_check(lambda p: classification_loss(p, y), phi)


def test_refinement_loss_value():
    x = torch.tensor([[1 / math.e, 1 - 1 / math.e],
                      [1 - 1 / math.e, 1 / math.e]], dtype=torch.float64)
    t = RefineTargets(np.array([0, 1]), np.array([1.0, 1.0]))
    assert refinement_loss(x, t).item() == pytest.approx(1.0)
    t2 = RefineTargets(np.array([0, 1]), np.array([1.0, 0.5]))
    assert refinement_loss(x, t2).item() == pytest.approx(0.75)


def test_refinement_loss_gradient():
    t = RefineTargets(np.array([0, 2, 1]), np.array([0.9, 1.0, 0.4]))
    rows = torch.tensor([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [0.25, 0.5, 0.25]])
    fd_check(lambda x: refinement_loss(x, t), rows)


def test_refinement_logits_matches_probability_form():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(5, 4, generator=g, dtype=torch.float64)
    t = RefineTargets(np.array([0, 3, 1, 2, 3]), np.array([0.9, 1, 0.2, 0.5, 1]))
    a = refinement_loss(torch.softmax(logits, dim=1), t).item()
    b = refinement_loss_logits(logits, t).item()
    assert a == pytest.approx(b, rel=1e-9)
    fd_check(lambda lg: refinement_loss_logits(lg, t), logits)


def test_regression_loss_values():
    # |d| = 0.5 -> 0.125 (quadratic zone); |d| = 2 -> 1.5 (linear zone)
    gt = np.array([[0.0, 0.0, 8.0, 8.0]])
    t = RegressionTargets(np.array([True]), np.zeros((1, 4)),
                          np.array([0]), gt, np.array([0]))
    v = torch.tensor([[0.5, 0.0, 0.0, 0.0]], dtype=torch.float64)
    assert regression_loss(v, t).item() == pytest.approx(0.125)
    v2 = torch.tensor([[2.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    assert regression_loss(v2, t).item() == pytest.approx(1.5)


def test_regression_loss_normalizes_by_all_proposals():
    gt = np.array([[0.0, 0.0, 8.0, 8.0]])
    t = RegressionTargets(np.array([True, False]), np.zeros((2, 4)),
                          np.array([0, -1]), gt, np.array([0]))
    v = torch.tensor([[2.0, 0, 0, 0], [9.0, 9, 9, 9]], dtype=torch.float64)
    assert regression_loss(v, t).item() == pytest.approx(1.5 / 2)


def test_regression_loss_unmatched_is_zero_with_grad():
    t = RegressionTargets(np.array([False]), np.zeros((1, 4)),
                          np.array([-1]), np.zeros((0, 4)), np.zeros(0, dtype=int))
    v = torch.ones((1, 4), requires_grad=True)
    loss = regression_loss(v, t)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.all(v.grad == 0)


def test_regression_loss_class_specific_slice():
    gt = np.array([[0.0, 0.0, 8.0, 8.0]])
    t = RegressionTargets(np.array([True]), np.zeros((1, 4)),
                          np.array([0]), gt, np.array([1]))
    v = torch.zeros((1, 12), dtype=torch.float64)
    v[0, 4:8] = 0.5                                  # category 1 slice
    assert regression_loss(v, t, num_classes=3).item() == pytest.approx(4 * 0.125)
    v2 = torch.zeros((1, 12), dtype=torch.float64)
    v2[0, 0:4] = 9.0                                 # other category ignored
    assert regression_loss(v2, t, num_classes=3).item() == 0.0
    with pytest.raises(ValueError):
        regression_loss(v, t)                        # 4C needs num_classes


def test_regression_loss_gradient():
    gt = np.array([[2.0, 2.0, 10.0, 12.0]])
    t = RegressionTargets(np.array([True, False]),
                          np.array([[0.1, -0.2, 0.3, 0.05], [0, 0, 0, 0.0]]),
                          np.array([0, -1]), gt, np.array([0]))
    v = torch.tensor([[0.4, 0.1, -0.3, 0.6], [1.0, 1.0, 1.0, 1.0]])
    fd_check(lambda x: regression_loss(x, t), v)


def test_cam_loss_value():
    probs = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    y = np.array([[1.0, 0.0]])
    assert cam_loss(probs, y).item() == pytest.approx(2 * math.log(2))


def test_cam_loss_gradient_and_logit_consistency():
    g = torch.Generator().manual_seed(1)
    scores = torch.randn(4, 3, generator=g, dtype=torch.float64)
    y = np.eye(3)[[0, 2, 1, 2]]
    a = cam_loss(torch.softmax(scores, dim=1), y).item()
    b = cam_loss_logits(scores, y).item()
    assert a == pytest.approx(b, rel=1e-9)
    probs = torch.tensor([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1],
                          [0.25, 0.5, 0.25], [0.4, 0.2, 0.4]])
    fd_check(lambda p: cam_loss(p, y), probs)
    fd_check(lambda s: cam_loss_logits(s, y), scores)


def test_segmentation_loss_value():
    s = torch.full((1, 2, 1, 1), 0.5, dtype=torch.float64)
    m = np.zeros((1, 2, 1, 1))
    m[0, 0] = 1.0
    # labeled category 0 and background both count: 2 * ln 2 over T*T = 1
    assert segmentation_loss(s, m, np.array([0]), 1).item() == pytest.approx(2 * math.log(2))


def test_segmentation_loss_ignores_other_categories():
    s = torch.full((1, 3, 2, 2), 0.5, dtype=torch.float64)
    s[0, 1] = 0.999                                 # unlabeled category channel
    m = np.zeros((1, 3, 2, 2))
    base = segmentation_loss(s, m, np.array([0]), 2).item()
    # channel 1 never contributes for a category-0 proposal
    s2 = s.clone()
    s2[0, 1] = 0.001
    assert segmentation_loss(s2, m, np.array([0]), 2).item() == pytest.approx(base)


def test_segmentation_background_proposal_only_bg_channel():
    s = torch.full((1, 3, 1, 1), 0.5, dtype=torch.float64)
    m = np.zeros((1, 3, 1, 1))
    # background-labeled proposal (category == C): only channel C counts
    val = segmentation_loss(s, m, np.array([2]), 2).item()
    assert val == pytest.approx(math.log(2))


def test_segmentation_loss_gradient_and_logit_consistency():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64)
    m = (torch.rand(2, 3, 2, 2, generator=g) > 0.5).double().numpy()
    cats = np.array([0, 2])
    a = segmentation_loss(torch.sigmoid(logits), m, cats, 2).item()
    b = segmentation_loss_logits(logits, m, cats, 2).item()
    assert a == pytest.approx(b, rel=1e-9)
    probs = torch.rand(2, 3, 2, 2, generator=g) * 0.8 + 0.1
    fd_check(lambda p: segmentation_loss(p, m, cats, 2), probs)
    fd_check(lambda lg: segmentation_loss_logits(lg, m, cats, 2), logits)


def test_total_loss_sums_exactly():
    parts = [torch.tensor(v) for v in (0.5, 0.25)]
    refine = [torch.tensor(v) for v in (0.1, 0.2, 0.3)]
    more = [torch.tensor(v) for v in (0.05, 1.5)]
    b = total_loss(parts[0], parts[1], refine, more[0], more[1])
    expect = parts[0] + parts[1] + refine[0] + refine[1] + refine[2] + more[0] + more[1]
    assert b.total.item() == expect.item()
    d = b.to_floats()
    assert d["lrefine"] == [pytest.approx(v.item()) for v in refine]
