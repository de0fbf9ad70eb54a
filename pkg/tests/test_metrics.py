"""Tests for the evaluation metrics and cohort tables."""

import math

import numpy as np
import pytest

from weakseg.errors import OutOfRange, ShapeMismatch
from weakseg.metrics import (
    COHORT_COLUMNS,
    ConfusionCounts,
    aggregate,
    cohort_frame,
    confusion,
    evaluate_case,
    max_diameter_cm,
    scores,
    stratified_table,
    stratify,
    summarize,
    tumor_volume_cm3,
    write_cohort_csv,
)
from weakseg.volio import LABEL_LIVER, LABEL_TUMOR, Mask


def _binary(selected, label=LABEL_TUMOR, spacing=(1.0, 1.0, 1.0)):
    return Mask(np.where(selected, label, 0).astype(np.uint8), spacing)


class TestConfusion:

    def test_identical_masks(self):
        a = np.random.default_rng(0).random((4, 4, 4)) < 0.4
        c = confusion(_binary(a), _binary(a), "tumor")
        assert c.fp == 0 and c.fn == 0
        assert c.total == 64

    def test_complement(self):
        a = np.random.default_rng(1).random((4, 4, 4)) < 0.4
        c = confusion(_binary(~a), _binary(a), "tumor")
        assert c.tp == 0 and c.tn == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 3, (4, 4, 4)).astype(np.uint8)
        gt = rng.integers(0, 3, (4, 4, 4)).astype(np.uint8)
        for cls, labels in (("liver", {1, 2}), ("tumor", {2}), (LABEL_LIVER, {1})):
            counts = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
            for index in np.ndindex(4, 4, 4):
                p, g = pred[index] in labels, gt[index] in labels
                key = ("t" if p == g else "f") + ("p" if p else "n")
                counts[key] += 1
            assert confusion(Mask(pred), Mask(gt), cls) == ConfusionCounts(**counts)

    def test_misaligned(self):
        with pytest.raises(ShapeMismatch):
            confusion(_binary(np.zeros((2, 2, 2), bool)), _binary(np.zeros((2, 2, 3), bool)), "tumor")


class TestScores:

    def test_worked_example(self):
        result = scores(ConfusionCounts(tp=5, tn=90, fp=5, fn=0))
        assert result["dice"] == pytest.approx(10 / 15)
        assert result["iou"] == pytest.approx(0.5)
        assert result["sensitivity"] == 1.0
        assert result["accuracy"] == pytest.approx(0.95)

    def test_perfect(self):
        a = np.zeros((5, 5, 5), dtype=bool)
        a[1:3, 1:4, 2] = True
        assert all(v == 1.0 for v in scores(confusion(_binary(a), _binary(a), "tumor")).values())

    def test_both_empty(self):
        result = scores(ConfusionCounts(tp=0, tn=27, fp=0, fn=0))
        assert result["accuracy"] == 1.0
        assert result["dice"] is None
        assert result["iou"] is None
        assert result["sensitivity"] is None

    def test_dice_iou_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            tp, tn, fp, fn = (int(v) for v in rng.integers(0, 100, 4))
            result = scores(ConfusionCounts(tp, tn, fp, fn))
            if result["dice"] is None:
                continue
            iou = result["iou"]
            assert result["dice"] == pytest.approx(2 * iou / (1 + iou), abs=1e-12)
            assert all(0.0 <= v <= 1.0 for v in result.values() if v is not None)

    def test_negative_counts(self):
        with pytest.raises(OutOfRange):
            ConfusionCounts(-1, 0, 0, 0)


class TestTumorSize:

    def test_small_volume(self):
        mask = _binary(np.ones((10, 10, 10), dtype=bool))
        assert tumor_volume_cm3(mask) == pytest.approx(1.0)
        assert stratify(tumor_volume_cm3(mask)) == "small"

    def test_large_block(self):
        mask = _binary(np.ones((10, 10, 10), dtype=bool), spacing=(10.0, 10.0, 10.0))
        assert tumor_volume_cm3(mask) == pytest.approx(1000.0)
        assert stratify(tumor_volume_cm3(mask)) == "large"
        assert max_diameter_cm(mask) == pytest.approx(10.0)
        assert stratify(max_diameter_cm(mask), "diameter") == "large"

    def test_threshold_is_inclusive(self):
        assert stratify(500.0) == "large"
        assert stratify(499.9) == "small"
        assert stratify(10.0, "diameter") == "large"

    def test_empty(self):
        mask = _binary(np.zeros((3, 3, 3), dtype=bool))
        assert tumor_volume_cm3(mask) == 0.0
        assert max_diameter_cm(mask) == 0.0
        assert stratify(0.0) == "n/a"

    def test_diameter_uses_longest_axis(self):
        selected = np.zeros((20, 20, 20), dtype=bool)
        selected[2:6, 3, 4] = True
        selected[2, 3:15, 4] = True
        mask = _binary(selected, spacing=(1.0, 0.5, 3.0))
        assert max_diameter_cm(mask) == pytest.approx(0.6)

    def test_unknown_mode(self):
        with pytest.raises(OutOfRange):
            stratify(1.0, "area")


def _case(seed, size=3, voxel_mm=10.0):
    rng = np.random.default_rng(seed)
    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt[1:7, 1:7, 1:7] = LABEL_LIVER
    gt[2:2 + size, 2:2 + size, 2:2 + size] = LABEL_TUMOR
    pred = gt.copy()
    flips = rng.random(gt.shape) < 0.05
    pred[flips] = rng.integers(0, 3, int(flips.sum()))
    gt_tumor = np.where(gt == LABEL_TUMOR, LABEL_TUMOR, 0).astype(np.uint8)
    pred_tumor = np.where(pred == LABEL_TUMOR, LABEL_TUMOR, 0).astype(np.uint8)
    spacing = (voxel_mm, voxel_mm, voxel_mm)
    return (Mask(pred, spacing), Mask(pred_tumor, spacing),
            Mask(gt, spacing), Mask(gt_tumor, spacing))


class TestCohort:

    def test_aggregate_fixture(self):
        mean, std, n = aggregate([0.81, 0.77, 0.92, 0.64, 0.70])
        assert mean == pytest.approx(0.768, abs=1e-12)
        assert std == pytest.approx(math.sqrt(0.01147), abs=1e-12)
        assert n == 5

    def test_aggregate_skips_undefined(self):
        assert aggregate([0.5, None, 0.7]) == (pytest.approx(0.6), pytest.approx(math.sqrt(0.02)), 2)
        assert aggregate([None]) == (None, None, 0)
        assert aggregate([0.4]) == (0.4, None, 1)

    def test_evaluate_case(self):
        report = evaluate_case(*_case(0))
        assert set(report.classes) == {"liver", "tumor"}
        assert report.tumor_volume_cm3 == pytest.approx(27.0)
        assert report.size_class == "small"
        assert evaluate_case(*_case(0, size=6, voxel_mm=20.0), mode="volume").size_class == "large"

    def test_summary_order_and_columns(self):
        results = [("two_step", evaluate_case(*_case(s))) for s in range(3)]
        results += [("multiclass-proxy", evaluate_case(*_case(s + 10))) for s in range(3)]
        table = summarize(results)
        assert list(table["method"]) == ["two_step", "two_step", "multiclass-proxy", "multiclass-proxy"]
        assert list(table["class"]) == ["liver", "tumor", "liver", "tumor"]
        frame = cohort_frame(results)
        expected = frame[(frame.method == "two_step") & (frame["class"] == "tumor")]["dice"].mean()
        assert table.loc[1, "dice"] == pytest.approx(expected)
        assert "dice_std" in table.columns

    def test_cohort_csv_header(self, tmp_path):
        results = [("two_step", evaluate_case(*_case(s))) for s in range(2)]
        table = write_cohort_csv(results, tmp_path / "cohort.csv")
        header = (tmp_path / "cohort.csv").read_text().splitlines()[0]
        assert header == ",".join(COHORT_COLUMNS)
        assert header == "method,class,accuracy,dice,sensitivity,iou"
        assert len(table) == 2

    def test_stratified_table(self):
        reports = [evaluate_case(*_case(0)), evaluate_case(*_case(1, size=6, voxel_mm=20.0))]
        table = stratified_table(reports)
        assert list(table["group"]) == ["all", "large", "small"]
        assert list(table["cases"]) == [2, 1, 1]

    def test_stratified_table_uses_requested_measure(self):
        labels = np.zeros((112, 3, 3), dtype=np.uint8)
        labels[:, :, :] = LABEL_LIVER
        labels[1:111, 1, 1] = LABEL_TUMOR
        liver = Mask(labels)
        tumor = _binary(labels == LABEL_TUMOR)
        report = evaluate_case(liver, tumor, liver, tumor)
        assert report.tumor_volume_cm3 == pytest.approx(0.11)
        assert report.tumor_diameter_cm == pytest.approx(11.0)
        assert report.size_class == "small"
        by_diameter = stratified_table([report], "diameter").set_index("group")["cases"]
        assert (by_diameter["large"], by_diameter["small"]) == (1, 0)
        by_volume = stratified_table([report], "volume").set_index("group")["cases"]
        assert (by_volume["large"], by_volume["small"]) == (0, 1)
