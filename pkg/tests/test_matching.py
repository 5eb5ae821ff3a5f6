import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gridvlp.matching import (
    Assignment, DetectionSet, GroundTruthObjects, MatchingError, detection_loss, giou, hungarian,
    match, matching_cost,
)
from gridvlp.verify import brute_force_assignment, finite_diff_grad, relative_error

BIG = 30.0  # logit that makes softmax numerically one-hot in float64


def one_hot_logits(labels, k, big=BIG):
    out = torch.full((len(labels), k), -big, dtype=torch.float64)
    out[torch.arange(len(labels)), labels] = big
    return out


def perfect_prediction(gt: GroundTruthObjects, n=5, k=3, a=4):
    cls = [k] * n
    attrs = [0] * n
    boxes = torch.full((n, 4), 0.5, dtype=torch.float64)
    for i in range(len(gt)):
        cls[i] = int(gt.classes[i])
        attrs[i] = int(gt.attributes[i])
        boxes[i] = gt.boxes[i]
    return DetectionSet(one_hot_logits(cls, k + 1), one_hot_logits(attrs, a), boxes)


def scene(m=2):
    boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2], [0.5, 0.8, 0.1, 0.1]],
                         dtype=torch.float64)[:m]
    return GroundTruthObjects(torch.tensor([0, 2, 1])[:m], boxes, torch.tensor([1, 3, 0])[:m])


# --- hungarian -------------------------------------------------------------------

def test_two_by_two_example():
    a = hungarian([[1, 2], [2, 1]])
    assert a.cols == [0, 1] and a.total_cost == 2


def test_single_entry():
    a = hungarian([[3.5]])
    assert a.cols == [0] and a.total_cost == 3.5


def test_random_3x5_matches_all_60_injections():
    rng = np.random.default_rng(0)
    cost = rng.random((3, 5))
    injections = list(itertools.permutations(range(5), 3))
    assert len(injections) == 60
    best = min(sum(cost[i, c] for i, c in enumerate(p)) for p in injections)
    assert hungarian(cost).total_cost == pytest.approx(best, abs=1e-12)


def test_lowest_column_tie_break():
    a = hungarian(np.zeros((2, 4)))
    assert a.cols == [0, 1]
    a = hungarian([[1, 1, 0], [0, 1, 1]])
    assert a.cols == [2, 0]


def test_rejects_bad_input():
    with pytest.raises(MatchingError):
        hungarian([[1.0, np.nan]])
    with pytest.raises(MatchingError):
        hungarian(np.ones((3, 2)))


def test_empty_rows():
    assert hungarian(np.zeros((0, 4))).cols == []


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31 - 1), st.booleans())
def test_equals_brute_force_with_tie_break(m, extra, seed, integer):
    rng = np.random.default_rng(seed)
    n = m + extra
    cost = rng.integers(0, 4, (m, n)).astype(float) if integer else rng.normal(size=(m, n))
    got = hungarian(cost)
    oracle = brute_force_assignment(cost)
    assert got.total_cost == oracle.total_cost
    assert tuple(got.cols) == oracle.cols  # lexicographically smallest optimum
    assert tuple(got.cols) in oracle.optimal


def test_assignment_rejects_non_injective():
    with pytest.raises(MatchingError):
        Assignment([0, 1], [2, 2], 0.0)


# --- GIoU -------------------------------------------------------------------------

def test_identical_boxes():
    b = torch.tensor([[0.4, 0.5, 0.2, 0.3]])
    assert float(giou(b, b)) == pytest.approx(1.0)


def test_disjoint_closed_form():
    a = torch.tensor([[0.1, 0.1, 0.1, 0.1]], dtype=torch.float64)
    b = torch.tensor([[0.9, 0.9, 0.1, 0.1]], dtype=torch.float64)
    hull = 0.9 ** 2
    union = 0.02
    expected = 0.0 - (hull - union) / hull
    assert float(giou(a, b)) == pytest.approx(expected, abs=1e-12)
    assert float(giou(a, b)) < 0


boxes = st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.5),
                  st.floats(0.01, 0.5))


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_giou_symmetric_and_bounded(a, b):
    ta = torch.tensor([a], dtype=torch.float64)
    tb = torch.tensor([b], dtype=torch.float64)
    g = float(giou(ta, tb))
    assert g == pytest.approx(float(giou(tb, ta)), abs=1e-12)
    assert -1 < g <= 1 + 1e-12


def test_giou_symmetric_bulk():
    g = torch.Generator().manual_seed(0)
    a = torch.cat([torch.rand(10000, 2, generator=g), 0.01 + 0.4 * torch.rand(10000, 2, generator=g)], 1)
    b = torch.cat([torch.rand(10000, 2, generator=g), 0.01 + 0.4 * torch.rand(10000, 2, generator=g)], 1)
    assert torch.equal(giou(a, b), giou(b, a))


# --- cost ---------------------------------------------------------------------------

def test_perfect_match_cost():
    gt = scene(1)
    pred = DetectionSet(one_hot_logits([0], 4, 200.0), torch.zeros(1, 4), gt.boxes.clone())
    assert float(matching_cost(gt, pred)[0, 0]) == pytest.approx(-1.0, abs=1e-12)


def test_uniform_class_cost():
    gt = scene(1)
    pred = DetectionSet(torch.zeros(1, 4, dtype=torch.float64), torch.zeros(1, 4), gt.boxes.clone())
    assert float(matching_cost(gt, pred)[0, 0]) == pytest.approx(-1 / 4, abs=1e-12)


def test_degenerate_prediction_cost_finite():
    gt = scene(2)
    boxes = torch.tensor([[0.5, 0.5, 0.0, 0.0], [0.2, 0.2, 0.0, 0.3]], dtype=torch.float64)
    pred = DetectionSet(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 4), boxes)
    assert torch.isfinite(matching_cost(gt, pred)).all()


def test_attributes_excluded_from_matching():
    gt = scene(2)
    pred = perfect_prediction(gt)
    cost = matching_cost(gt, pred)
    shuffled = DetectionSet(pred.class_logits, torch.randn_like(pred.attr_logits), pred.boxes)
    assert torch.equal(matching_cost(gt, shuffled), cost)


# --- detection loss -------------------------------------------------------------------

def test_empty_scene_is_no_object_only():
    pred = DetectionSet(torch.randn(1, 5, 4, dtype=torch.float64), torch.randn(1, 5, 4),
                        torch.rand(1, 5, 4, dtype=torch.float64))
    gt = GroundTruthObjects(torch.zeros(0, dtype=torch.long), torch.zeros(0, 4, dtype=torch.float64),
                            torch.zeros(0, dtype=torch.long))
    out = detection_loss([gt], pred, [match(gt, pred[0])])
    expected = -0.1 * torch.log_softmax(pred.class_logits[0], -1)[:, 3].sum()
    assert float(out["total"]) == pytest.approx(float(expected), rel=1e-12)
    assert float(out["l1"]) == 0.0


def test_perfect_prediction_zero_loss():
    gt = scene(3)
    pred = perfect_prediction(gt)
    batch = DetectionSet(pred.class_logits[None], pred.attr_logits[None], pred.boxes[None])
    out = detection_loss([gt], batch, [match(gt, pred)])
    assert float(out["total"]) == pytest.approx(0.0, abs=1e-10)


def test_unannotated_attributes_masked():
    gt = scene(2)
    gt = GroundTruthObjects(gt.classes, gt.boxes, torch.tensor([-1, -1]))
    pred = perfect_prediction(scene(2))
    batch = DetectionSet(pred.class_logits[None], torch.randn(1, 5, 4), pred.boxes[None])
    out = detection_loss([gt], batch, [match(gt, pred)])
    assert float(out["attr"]) == 0.0


def random_prediction(seed, n=5):
    g = torch.Generator().manual_seed(seed)
    return DetectionSet(torch.randn(1, n, 4, generator=g, dtype=torch.float64),
                        torch.randn(1, n, 4, generator=g, dtype=torch.float64),
                        (0.1 + 0.8 * torch.rand(1, n, 4, generator=g, dtype=torch.float64)))


@settings(max_examples=40, deadline=None)
@given(st.permutations([0, 1, 2]), st.integers(0, 10000))
def test_loss_invariant_to_gt_order(order, seed):
    gt = scene(3)
    pred = random_prediction(seed)
    base = detection_loss([gt], pred, [match(gt, pred[0])])["total"]
    perm = gt.permute(order)
    again = detection_loss([perm], pred, [match(perm, pred[0])])["total"]
    assert float(again) == pytest.approx(float(base), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10000), st.integers(0, 3))
def test_loss_non_negative(seed, m):
    gt = scene(m) if m else GroundTruthObjects(torch.zeros(0, dtype=torch.long),
                                               torch.zeros(0, 4), torch.zeros(0, dtype=torch.long))
    pred = random_prediction(seed)
    assert float(detection_loss([gt], pred, [match(gt, pred[0])])["total"]) >= 0


def test_box_gradient_matches_finite_differences():
    gt = scene(3)
    pred = random_prediction(7)
    boxes = pred.boxes.clone().requires_grad_(True)
    sigma = match(gt, pred[0])

    def loss():
        return detection_loss([gt], DetectionSet(pred.class_logits, pred.attr_logits, boxes),
                              [sigma])["total"]

    loss().backward()
    fd = finite_diff_grad(loss, boxes)
    assert relative_error(boxes.grad, fd.grad) < 1e-4


def test_matching_does_not_carry_gradient():
    gt = scene(2)
    pred = random_prediction(3)
    logits = pred.class_logits.clone().requires_grad_(True)
    assert not matching_cost(gt, DetectionSet(logits[0], pred.attr_logits[0], pred.boxes[0])).requires_grad


def test_contract_errors():
    gt = scene(2)
    pred = random_prediction(0)
    with pytest.raises(MatchingError):
        detection_loss([gt], pred, [Assignment([0], [1], 0.0)])
    with pytest.raises(MatchingError):
        detection_loss([gt], pred, [Assignment([0, 1], [1, 9], 0.0)])
    with pytest.raises(MatchingError):
        GroundTruthObjects(torch.tensor([0]), torch.tensor([[0.5, 0.5, 0.0, 0.1]]))
    with pytest.raises(MatchingError):
        GroundTruthObjects(torch.tensor([0]), torch.tensor([[1.5, 0.5, 0.1, 0.1]]))
