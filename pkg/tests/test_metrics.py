import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occgt.errors import ValidationError
from occgt.metrics import (
    OCC3D_CLASSES,
    ConfusionMatrix,
    binary_iou,
    confusion,
    confusion_4d,
    metrics_report,
    miou,
    per_class_iou,
    temporal_iou,
)
from occgt.occupancy import GridSpec, OccupancyGrid, OccupancyGrid4D, SemanticGrid
from reference_values import SEGMENTATION_MEANS, SEGMENTATION_ROWS


def spec_of(dims):
    return GridSpec((0, 0, 0), (1, 1, 1), dims)


def occ(cells, dims=(2, 2, 2)):
    bits = np.zeros(dims, bool)
    for c in cells:
        bits[c] = True
    return OccupancyGrid(spec_of(dims), bits)


def sem(classes):
    classes = np.asarray(classes, np.uint8)
    return SemanticGrid(spec_of(classes.shape), classes)


class TestBinaryIou:
    def test_identical(self):
        assert binary_iou(occ([(0, 0, 0), (1, 1, 1)]), occ([(0, 0, 0), (1, 1, 1)])) == 1.0

    def test_disjoint(self):
        assert binary_iou(occ([(0, 0, 0)]), occ([(1, 1, 1)])) == 0.0

    def test_hand_case(self):
        # TP = {(0,0,1)}, FP = {(0,0,0)}, FN = {(0,1,0)}
        assert binary_iou(occ([(0, 0, 0), (0, 0, 1)]), occ([(0, 0, 1), (0, 1, 0)])) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert binary_iou(occ([]), occ([])) == 1.0

    def test_spec_mismatch(self):
        with pytest.raises(ValidationError):
            binary_iou(occ([], (2, 2, 2)), occ([], (2, 2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_and_identity(self, seed):
        rng = np.random.default_rng(seed)
        a = OccupancyGrid(spec_of((3, 4, 5)), rng.random((3, 4, 5)) < 0.3)
        b = OccupancyGrid(spec_of((3, 4, 5)), rng.random((3, 4, 5)) < 0.3)
        assert binary_iou(a, b) == binary_iou(b, a)
        assert 0.0 <= binary_iou(a, b) <= 1.0
        assert (binary_iou(a, b) == 1.0) == bool(np.array_equal(a.bits, b.bits))


class TestConfusion:
    def test_diagonal(self):
        g = np.random.default_rng(0).integers(0, 5, (3, 4, 5))
        cm = confusion(sem(g), sem(g), 5)
        off = cm.counts.copy()
        np.fill_diagonal(off, 0)
        assert not off.any() and cm.ignored == 0
        np.testing.assert_array_equal(np.diag(cm.counts), np.bincount(g.ravel(), minlength=5))

    def test_all_ignored(self):
        cm = confusion(sem(np.zeros((2, 3, 4))), sem(np.full((2, 3, 4), 255)), 3)
        assert cm.total == 0 and cm.ignored == 24

    def test_two_class_hand_enumeration(self):
        gt = [[[0, 0], [1, 1]], [[0, 1], [255, 1]]]
        pred = [[[0, 1], [1, 0]], [[255, 1], [0, 1]]]
        cm = confusion(sem(pred), sem(gt), 2)
        # gt0: pred0 x1, pred1 x1, empty x1; gt1: pred0 x1, pred1 x3
        np.testing.assert_array_equal(cm.counts, [[1, 1, 1], [1, 3, 0]])
        assert cm.ignored == 1
        ious = per_class_iou(cm)
        # class 0: 1 / (3 + 2 - 1); class 1: 3 / (4 + 4 - 3)
        np.testing.assert_allclose(ious, [1 / 4, 3 / 5])
        assert miou(ious) == pytest.approx((1 / 4 + 3 / 5) / 2)

    def test_predicted_empty_lowers_iou(self):
        cm = confusion(sem([[[255, 0]]]), sem([[[0, 0]]]), 1)
        assert per_class_iou(cm)[0] == 0.5

    def test_class_out_of_range(self):
        with pytest.raises(ValidationError):
            confusion(sem([[[3]]]), sem([[[0]]]), 3)

    def test_random_matches_loop(self):
        rng = np.random.default_rng(1)
        pred = np.where(rng.random((4, 5, 6)) < 0.2, 255, rng.integers(0, 4, (4, 5, 6)))
        gt = np.where(rng.random((4, 5, 6)) < 0.2, 255, rng.integers(0, 4, (4, 5, 6)))
        cm = confusion(sem(pred), sem(gt), 4)
        expected = np.zeros((4, 5), int)
        ignored = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == 255:
                ignored += 1
            else:
                expected[g, 4 if p == 255 else p] += 1
        np.testing.assert_array_equal(cm.counts, expected)
        assert cm.ignored == ignored and cm.total + cm.ignored == pred.size

    @pytest.mark.parametrize("threads", [2, 3, 8])
    def test_threads_identical(self, threads):
        rng = np.random.default_rng(2)
        pred = sem(rng.integers(0, 17, (8, 16, 16)))
        gt = sem(np.where(rng.random((8, 16, 16)) < 0.1, 255, rng.integers(0, 17, (8, 16, 16))))
        assert confusion(pred, gt, 17, threads) == confusion(pred, gt, 17, 1)

    def test_add(self):
        a = ConfusionMatrix(1, np.array([[1, 2]]), 3)
        assert a + a == ConfusionMatrix(1, np.array([[2, 4]]), 6)


class TestPerClassIou:
    def test_perfect(self):
        g = [[[0, 1], [2, 2]]]
        np.testing.assert_array_equal(per_class_iou(confusion(sem(g), sem(g), 3)), [1, 1, 1])

    def test_absent_class(self):
        g = [[[0, 2]]]
        ious = per_class_iou(confusion(sem(g), sem(g), 3))
        assert math.isnan(ious[1])
        assert miou(ious) == 1.0

    def test_all_absent(self):
        with pytest.raises(ValidationError):
            miou([math.nan, math.nan])


class TestMiouReference:
    @pytest.mark.parametrize("name", list(SEGMENTATION_ROWS))
    def test_row_mean(self, name):
        row, _ = SEGMENTATION_ROWS[name]
        assert len(row) == len(OCC3D_CLASSES) == 17
        assert miou(row) == pytest.approx(SEGMENTATION_MEANS[name], abs=1e-9)

    def test_nan_entries_excluded(self):
        row, _ = SEGMENTATION_ROWS["bevstereo"]
        assert miou(row + [math.nan]) == miou(row)


def grid4d(bits, semantics=None):
    bits = np.asarray(bits, bool)
    return OccupancyGrid4D(spec_of(bits.shape[1:]), bits, semantics)


class TestTemporalIou:
    def test_identical(self):
        g = grid4d(np.random.default_rng(3).random((3, 2, 2, 2)) < 0.5)
        assert temporal_iou(g, g) == [1.0, 1.0, 1.0]

    def test_second_disjoint(self):
        a = np.zeros((2, 2, 2, 2), bool)
        b = a.copy()
        a[:, 0, 0, 0] = True
        b[0, 0, 0, 0] = True
        b[1, 1, 1, 1] = True
        assert temporal_iou(grid4d(a), grid4d(b)) == [1.0, 0.0]

    def test_random_brute_force(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((2, 8, 8, 8)) < 0.4, rng.random((2, 8, 8, 8)) < 0.4
        expected = []
        for t in range(2):
            tp = fp = fn = 0
            for x, y in zip(a[t].ravel(), b[t].ravel()):
                tp += x and y
                fp += x and not y
                fn += y and not x
            expected.append(tp / (tp + fp + fn))
        np.testing.assert_allclose(temporal_iou(grid4d(a), grid4d(b)), expected, rtol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            temporal_iou(grid4d(np.zeros((1, 2, 2, 2))), grid4d(np.zeros((2, 2, 2, 2))))


class TestReport:
    def test_binary_only(self):
        rng = np.random.default_rng(5)
        a = grid4d(rng.random((2, 3, 3, 3)) < 0.5)
        r = metrics_report(a, a)
        assert r["binary_iou"] == 1.0 and r["temporal_iou"] == [1.0, 1.0]
        assert r["voxel_counts"]["fp"] == 0 and "miou" not in r

    def test_semantic(self):
        rng = np.random.default_rng(6)
        bits = rng.random((1, 3, 3, 3)) < 0.5
        s = np.where(bits, rng.integers(0, 17, bits.shape), 255).astype(np.uint8)
        r = metrics_report(grid4d(bits, s), grid4d(bits, s), semantic=True)
        assert r["miou"] == 1.0
        assert set(r["per_class_iou"]) == set(OCC3D_CLASSES)

    def test_confusion_4d_needs_semantics(self):
        g = grid4d(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValidationError):
            confusion_4d(g, g, 17)
