import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffseg.grids import GridError
from diffseg.metrics import (
    ConfusionMatrix,
    boundary_band,
    boundary_iou,
    default_boundary_d,
    eval_report,
    miou,
)
from helpers import band_oracle, biou_oracle, shifted_square


# ---------------------------------------------------------------------------
# mIoU
# ---------------------------------------------------------------------------


def test_two_by_two_fixture():
    r = miou([np.array([[0, 1], [1, 1]])], [np.array([[0, 0], [1, 1]])], 2)
    assert r.per_class[0] == 1 / 2 and r.per_class[1] == 2 / 3
    assert r.mean == pytest.approx(7 / 12, abs=1e-15)


def test_identity_and_complement():
    g = np.random.default_rng(0).integers(0, 2, (9, 9))
    assert miou([g], [g], 2).mean == 1.0
    assert miou([1 - g], [g], 2).mean == 0.0


def test_confusion_orientation():
    cm = ConfusionMatrix.empty(3).add(np.array([[2, 2]]), np.array([[0, 2]]))
    assert cm.counts[2, 0] == 1 and cm.counts[2, 2] == 1 and cm.counts.sum() == 2


def test_absent_class_excluded():
    r = miou([np.array([[0, 2]])], [np.array([[0, 2]])], 4)
    assert math.isnan(r.per_class[1]) and math.isnan(r.per_class[3])
    assert r.mean == 1.0


@settings(max_examples=40)
@given(arrays(np.int64, (5, 6), elements=st.integers(0, 1)), arrays(np.int64, (5, 6), elements=st.integers(0, 1)))
def test_binary_miou_symmetric(a, b):
    np.testing.assert_allclose(miou([a], [b], 2).mean, miou([b], [a], 2).mean, rtol=0, atol=1e-15)


def test_split_accumulation_equals_concatenation():
    rng = np.random.default_rng(1)
    preds = [rng.integers(0, 4, (8, 8)) for _ in range(6)]
    gts = [rng.integers(0, 4, (8, 8)) for _ in range(6)]
    a = ConfusionMatrix.empty(4)
    for p, g in zip(preds[:3], gts[:3]):
        a.add(p, g)
    b = ConfusionMatrix.empty(4)
    for p, g in zip(preds[3:], gts[3:]):
        b.add(p, g)
    whole = ConfusionMatrix.empty(4).add(np.concatenate(preds), np.concatenate(gts))
    assert np.array_equal(a.merge(b).counts, whole.counts)
    np.testing.assert_array_equal(miou(preds, gts, 4).per_class, whole.per_class_iou())


def test_shape_and_range_errors():
    with pytest.raises(GridError):
        miou([np.zeros((2, 2), int)], [np.zeros((2, 3), int)], 2)
    with pytest.raises(GridError):
        miou([np.full((2, 2), 2)], [np.zeros((2, 2), int)], 2)
    with pytest.raises(GridError):
        miou([np.zeros((2, 2), int)], [], 2)


# ---------------------------------------------------------------------------
# boundary IoU
# ---------------------------------------------------------------------------


def test_shifted_square_band_values():
    pred, gt = shifted_square()
    # class 1: 12-pixel rings sharing rows 2 and 5 at columns 3..5 -> 6 / 18
    # class 0: image-border ring (28) plus each halo; overlap 38, union 52
    assert biou_oracle(pred, gt, 2, 1) == [Fraction(19, 26), Fraction(1, 3)]
    r = boundary_iou([pred], [gt], 2, d=1)
    assert r.per_class[0] == 19 / 26 and r.per_class[1] == 1 / 3
    assert r.mean == pytest.approx(83 / 156, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (7, 9), elements=st.integers(0, 2)), st.integers(1, 3))
def test_band_matches_brute_force(grid, d):
    for c in range(3):
        m = grid == c
        assert np.array_equal(boundary_band(m, d), band_oracle(m, d))


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 2)), arrays(np.int64, (6, 6), elements=st.integers(0, 2)), st.integers(1, 2))
def test_biou_matches_brute_force(pred, gt, d):
    r = boundary_iou([pred], [gt], 3, d=d)
    expected = biou_oracle(pred, gt, 3, d)
    got = [v for v in r.per_class if not math.isnan(v)]
    assert got == [float(f) for f in expected]
    assert 0.0 <= r.mean <= 1.0


def test_biou_identity():
    g = np.random.default_rng(2).integers(0, 4, (16, 16))
    assert boundary_iou([g], [g], 4).mean == 1.0


def test_biou_absent_class_excluded():
    g = np.array([[0, 0, 1, 1]] * 4)
    r = boundary_iou([g], [g], 3, d=1)
    assert math.isnan(r.per_class[2]) and r.mean == 1.0


def test_biou_rejects_bad_d():
    with pytest.raises(ValueError):
        boundary_iou([np.zeros((4, 4), int)], [np.zeros((4, 4), int)], 2, d=0)


def test_default_band_distance():
    assert default_boundary_d(64, 64) == 2
    assert default_boundary_d(4, 4) == 1
    assert default_boundary_d(512, 512) == 14


def test_eval_report_is_json():
    pred, gt = shifted_square()
    rep = eval_report([pred], [gt], 3, d=1, config_hash="abc")
    assert set(rep) == {"miou", "biou", "per_class_iou", "per_class_biou", "n_images", "config_hash"}
    assert rep["per_class_iou"][2] is None and rep["n_images"] == 1
    json.loads(json.dumps(rep, allow_nan=False))
