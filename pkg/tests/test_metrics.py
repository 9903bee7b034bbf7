from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irbaf.metrics import ConfusionMatrix, MetricsError, accumulate, exact_mean, report


def brute_force(pred, gt, k):
    """Per-class |intersection| / |union| by walking every pixel pair."""
    inter, union, rows, hits = [0] * k, [0] * k, [0] * k, [0] * k
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        for c in range(k):
            if p == c and g == c:
                inter[c] += 1
            if p == c or g == c:
                union[c] += 1
        rows[g] += 1
        if p == g:
            hits[g] += 1
    ious = {c: Fraction(inter[c], union[c]) for c in range(k) if union[c]}
    accs = {c: Fraction(hits[c], rows[c]) for c in range(k) if rows[c]}
    return ious, accs


def test_hand_enumerated_counts():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 1], [0, 1]])
    cm = accumulate(ConfusionMatrix(2), pred, gt)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    rep = report(cm)
    assert rep.iou_per_class[1] == pytest.approx(2 / 3)
    assert rep.acc_per_class[1] == 1.0
    assert rep.iou_per_class[0] == 0.5
    assert rep.acc_per_class[0] == 0.5


def test_perfect_prediction_only_diagonal():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, size=(6, 6))
    cm = accumulate(ConfusionMatrix(4), gt, gt)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    rep = report(cm)
    assert rep.miou == 1.0 and rep.macc == 1.0


def test_halves_accumulate_to_whole():
    rng = np.random.default_rng(1)
    pred, gt = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
    whole = accumulate(ConfusionMatrix(3), pred, gt)
    halves = accumulate(accumulate(ConfusionMatrix(3), pred[:4], gt[:4]), pred[4:], gt[4:])
    assert np.array_equal(whole.counts, halves.counts)
    merged = accumulate(ConfusionMatrix(3), pred[:4], gt[:4]) + accumulate(ConfusionMatrix(3), pred[4:], gt[4:])
    assert np.array_equal(whole.counts, merged.counts)


def test_published_miou_is_plain_mean():
    ious = [Fraction(9649, 10000), Fraction(7844, 10000), Fraction(7398, 10000), Fraction(6659, 10000)]
    assert round(100 * exact_mean(ious), 3) == 78.875


def test_brute_force_oracle_agrees_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        pred, gt = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        rep = report(accumulate(ConfusionMatrix(4), pred, gt))
        ious, accs = brute_force(pred, gt, 4)
        assert rep.iou_per_class == {c: float(v) for c, v in ious.items()}
        assert rep.acc_per_class == {c: float(v) for c, v in accs.items()}
        assert rep.miou == float(sum(ious.values()) / len(ious))


def test_absent_class_excluded_from_means():
    gt = np.array([[0, 0], [1, 1]])
    rep = report(accumulate(ConfusionMatrix(3), gt, gt))
    assert 2 not in rep.iou_per_class and rep.miou == 1.0


@pytest.mark.parametrize(
    "pred, gt, k",
    [
        (np.zeros((2, 2)), np.zeros((2, 3)), 2),
        (np.full((2, 2), 2), np.zeros((2, 2)), 2),
    ],
)
def test_rejects_bad_input(pred, gt, k):
    with pytest.raises(MetricsError):
        accumulate(ConfusionMatrix(k), pred.astype(int), gt.astype(int))


def test_empty_matrix_rejected():
    with pytest.raises(MetricsError):
        report(ConfusionMatrix(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations(range(4)))
def test_label_permutation_permutes_metrics(seed, perm):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    perm = np.array(perm)
    a = report(accumulate(ConfusionMatrix(4), pred, gt))
    b = report(accumulate(ConfusionMatrix(4), perm[pred], perm[gt]))
    assert {int(perm[c]): v for c, v in a.iou_per_class.items()} == b.iou_per_class
    assert a.miou == b.miou


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_values_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 5, (5, 7)), rng.integers(0, 5, (5, 7))
    rep = report(accumulate(ConfusionMatrix(5), pred, gt))
    vals = [*rep.iou_per_class.values(), *rep.acc_per_class.values(), rep.miou, rep.macc]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert rep.pixel_count == 35
