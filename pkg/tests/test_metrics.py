import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chamfer_brute, f1_brute, iou_brute, transfer_brute
from ssckit.classes import SemanticClass
from ssckit.geometry import LabeledCloud
from ssckit.metrics import chamfer, evaluate, f1_at, iou, table_row, transfer_labels


def test_identical_clouds():
    pts = np.random.default_rng(0).normal(size=(40, 3))
    cd = chamfer(pts, pts)
    assert (cd.l1, cd.l2) == (0.0, 0.0)
    assert f1_at(pts, pts, 0.3) == 100.0


def test_three_four_five():
    cd = chamfer([[0.0, 0, 0]], [[3.0, 4, 0]])
    assert cd.l1 == 10.0
    assert cd.l2 == 50.0
    assert cd.cd_l1 == 10000.0
    assert cd.cd_l2 == 50000.0


def test_f1_threshold():
    p, q = [[0.0, 0, 0]], [[0.2, 0, 0]]
    assert f1_at(p, q, 0.3) == 100.0
    assert f1_at(p, q, 0.1) == 0.0


def test_f1_inclusive_at_threshold():
    assert f1_at([[0.0, 0, 0]], [[0.25, 0, 0]], 0.25) == 100.0


def test_empty_inputs_raise():
    with pytest.raises(ValueError, match="undefined Chamfer"):
        chamfer(np.zeros((0, 3)), [[0.0, 0, 0]])
    with pytest.raises(ValueError):
        f1_at([[0.0, 0, 0]], np.zeros((0, 3)), 0.3)


def test_chamfer_and_f1_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(30):
        p = rng.normal(size=(rng.integers(1, 300), 3))
        q = rng.normal(size=(rng.integers(1, 300), 3)) + 0.2
        l1, l2 = chamfer_brute(p, q)
        cd = chamfer(p, q)
        assert cd.l1 == pytest.approx(l1, rel=1e-12)
        assert cd.l2 == pytest.approx(l2, rel=1e-12)
        assert f1_at(p, q, 0.3) == pytest.approx(f1_brute(p, q, 0.3), rel=1e-12)


def test_chamfer_symmetric():
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    assert chamfer(p, q).l1 == pytest.approx(chamfer(q, p).l1, rel=1e-14)


def test_f1_non_decreasing_in_threshold():
    rng = np.random.default_rng(3)
    p, q = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    scores = [f1_at(p, q, t) for t in np.linspace(0.01, 2.0, 40)]
    assert all(a <= b for a, b in zip(scores, scores[1:]))


def test_transfer_labels():
    gt = LabeledCloud([[0.0, 0, 0], [3.0, 0, 0]], [SemanticClass.ROAD, SemanticClass.CAR])
    assert transfer_labels([[1.0, 0, 0]], gt).tolist() == [SemanticClass.ROAD]
    np.testing.assert_array_equal(transfer_labels(gt.points, gt), gt.labels)


def test_transfer_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(20):
        gt = LabeledCloud(rng.integers(0, 6, size=(200, 3)).astype(float), rng.integers(0, 17, 200))
        pred = rng.integers(0, 6, size=(150, 3)) + rng.choice([0.0, 0.5], size=(150, 3))
        np.testing.assert_array_equal(transfer_labels(pred, gt), transfer_brute(pred, gt.points, gt.labels))


def test_transfer_needs_labels():
    with pytest.raises(ValueError):
        transfer_labels([[0.0, 0, 0]], LabeledCloud([[0.0, 0, 0]]))


def test_iou_hand_count():
    road, car = SemanticClass.ROAD, SemanticClass.CAR
    per_class, miou = iou([road, road], [road, car])
    assert per_class[road] == 50.0
    assert per_class[car] == 0.0
    assert miou == 25.0
    assert per_class[SemanticClass.TREE] is None


def test_iou_perfect_and_excludes_unlabeled():
    labels = np.array([0, 1, 1, 3, 3, 3])
    per_class, miou = iou(labels, labels)
    assert miou == 100.0
    assert SemanticClass.UNLABELED not in per_class
    # predicting unlabeled on a scored point is a miss for that class only
    per_class, _ = iou([0, 1], [1, 1])
    assert per_class[SemanticClass.BUILDING] == 50.0


def test_iou_no_classes_is_nan():
    _, miou = iou([0, 0], [0, 0])
    assert math.isnan(miou)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60), st.randoms())
def test_iou_matches_brute_force_and_permutation(pairs, rnd):
    pred = np.array([p for p, _ in pairs])
    gt = np.array([g for _, g in pairs])
    per_class, miou = iou(pred, gt)
    ref, ref_miou = iou_brute(pred, gt)
    got = {int(c): v for c, v in per_class.items() if v is not None}
    assert got.keys() == ref.keys()
    for c in ref:
        assert got[c] == pytest.approx(ref[c], rel=1e-12)
    if ref:
        assert miou == pytest.approx(ref_miou, rel=1e-12)
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    _, miou2 = iou(pred[order], gt[order])
    assert (math.isnan(miou) and math.isnan(miou2)) or miou2 == pytest.approx(miou, rel=1e-12)


def test_evaluate_identity():
    rng = np.random.default_rng(5)
    gt = LabeledCloud(rng.normal(size=(100, 3)), rng.integers(1, 5, 100))
    r = evaluate(gt, gt)
    assert (r.cd_l1, r.cd_l2, r.f1, r.miou) == (0.0, 0.0, 100.0, 100.0)
    assert r.threshold == 0.3


def test_evaluate_degraded_matches_reference():
    rng = np.random.default_rng(6)
    gt = LabeledCloud(rng.uniform(0, 10, size=(400, 3)), rng.integers(1, 6, 400))
    noisy = gt.points + rng.normal(0, 0.1, gt.points.shape)
    labels = gt.labels.copy()
    flip = rng.choice(400, 40, replace=False)
    labels[flip] = (labels[flip] % 5) + 1
    pred = LabeledCloud(noisy, labels)
    r = evaluate(pred, gt)
    l1, l2 = chamfer_brute(pred.points, gt.points)
    assert r.cd_l1 > 0 and r.miou < 100
    assert r.cd_l1 == pytest.approx(1000 * l1, rel=1e-9)
    assert r.cd_l2 == pytest.approx(1000 * l2, rel=1e-9)
    assert r.f1 == pytest.approx(f1_brute(pred.points, gt.points, 0.3), rel=1e-9)
    _, ref_miou = iou_brute(pred.labels, transfer_brute(pred.points, gt.points, gt.labels))
    assert r.miou == pytest.approx(ref_miou, rel=1e-9)


def test_table_row_formatting():
    gt = LabeledCloud([[0.0, 0, 0], [1.0, 0, 0]], [1, 3])
    head, values = table_row(evaluate(gt, gt)).splitlines()
    assert "mIoU" in head
    assert "100.00" in values and "0.00" in values
