import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densecrf.core import VOID
from densecrf.metrics import accumulate, confusion, iou_per_class, mean_iou


def test_perfect_prediction():
    gt = np.array([[0, 1, 2], [2, 1, 0]])
    cm = accumulate(confusion(3), gt, gt)
    assert np.trace(cm) == 6
    np.testing.assert_array_equal(iou_per_class(cm), 1.0)
    assert mean_iou(cm) == 1.0


def test_ten_pixels_on_diagonal():
    gt = np.arange(10).reshape(2, 5) % 3
    assert np.trace(accumulate(confusion(3), gt, gt)) == 10


def test_direct_count():
    cm = accumulate(confusion(2), np.array([0, 1]), np.array([1, 1]))
    np.testing.assert_array_equal(cm, [[0, 1], [0, 1]])


def test_hand_iou():
    cm = np.array([[3, 1], [2, 4]])
    np.testing.assert_allclose(iou_per_class(cm), [0.5, 4 / 7])
    assert mean_iou(cm) == pytest.approx((0.5 + 4 / 7) / 2)
    assert round(mean_iou(cm), 4) == 0.5357


def test_all_void_leaves_cm_unchanged():
    cm = np.array([[1, 0], [0, 2]])
    accumulate(cm, np.full((3, 3), VOID), np.zeros((3, 3), int))
    np.testing.assert_array_equal(cm, [[1, 0], [0, 2]])


def test_absent_class_excluded():
    cm = accumulate(confusion(3), np.array([0, 0, 1]), np.array([0, 1, 1]))
    iou = iou_per_class(cm)
    assert np.isnan(iou[2])
    assert mean_iou(cm) == pytest.approx((0.5 + 0.5) / 2)


def test_single_defined_class_equals_accuracy():
    gt = np.zeros(10, int)
    pred = np.zeros(10, int)
    cm = accumulate(confusion(1), gt, pred)
    assert mean_iou(cm) == 1.0


def test_empty_matrix_is_undefined():
    assert np.isnan(mean_iou(confusion(3)))


def test_errors():
    with pytest.raises(ValueError):
        accumulate(confusion(2), np.zeros(3, int), np.zeros(4, int))
    with pytest.raises(ValueError):
        accumulate(confusion(2), np.array([0, 2]), np.array([0, 1]))


@given(st.integers(2, 6), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_permutation_invariance_and_range(L, n, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, L, n)
    gt[rng.random(n) < 0.2] = VOID
    pred = rng.integers(0, L, n)
    perm = rng.permutation(L)
    cm = accumulate(confusion(L), gt, pred)
    keep = gt != VOID
    gt_p = gt.copy()
    gt_p[keep] = perm[gt[keep]]
    cm_p = accumulate(confusion(L), gt_p, perm[pred])
    np.testing.assert_allclose(iou_per_class(cm_p)[perm], iou_per_class(cm), equal_nan=True)
    m = mean_iou(cm)
    if not np.isnan(m):
        assert 0.0 <= m <= 1.0
        assert mean_iou(cm_p) == pytest.approx(m, abs=1e-15)
    assert cm.sum() == keep.sum()


@given(st.integers(2, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_accumulation_is_additive(L, k, seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, L, 7), rng.integers(0, L, 7)) for _ in range(k)]
    total = confusion(L)
    for g, p in pairs:
        accumulate(total, g, p)
    whole = accumulate(confusion(L), np.concatenate([g for g, _ in pairs]), np.concatenate([p for _, p in pairs]))
    np.testing.assert_array_equal(total, whole)
