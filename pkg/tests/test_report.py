"""Tests for the diagnostic summary."""

import json

import numpy as np
import pytest

from weakseg.errors import ShapeMismatch
from weakseg.report import emit_report, lesions, significant, write_report
from weakseg.volio import LABEL_LIVER, LABEL_TUMOR, ClinicalRecord, Mask


def _masks(shape, liver_box, tumor_boxes, spacing):
    labels = np.zeros(shape, dtype=np.uint8)
    labels[liver_box] = LABEL_LIVER
    tumor = np.zeros(shape, dtype=np.uint8)
    for box in tumor_boxes:
        labels[box] = LABEL_TUMOR
        tumor[box] = LABEL_TUMOR
    return Mask(labels, spacing), Mask(tumor, spacing)


def test_significant():
    assert significant(0.0079365) == 0.00794
    assert significant(1008.0) == 1010.0
    assert significant(2.0) == 2.0


def test_no_lesion():
    liver, tumor = _masks((8, 8, 8), np.s_[1:7, 1:7, 1:7], [], (1.0, 1.0, 1.0))
    text, summary = emit_report(liver, tumor)
    assert "No lesion detected." in text
    assert summary["lesion_count"] == 0
    assert summary["tlvr"] == 0.0
    assert summary["size_class"] == "n/a"


def test_block_with_adjacent_tumor():
    liver, tumor = _masks(
        (64, 64, 64), np.s_[2:52, 2:52, 2:52], [np.s_[52:62, 10:20, 10:20]], (2.0, 2.0, 2.0))
    text, summary = emit_report(liver, tumor)
    assert summary["tlvr"] == 0.00794
    assert summary["lesion_count"] == 1
    assert summary["lesions"] == [{"volume_cm3": 8.0, "diameter_cm": 2.0}]
    assert summary["total_tumor_volume_cm3"] == 8.0
    assert summary["liver_volume_cm3"] == 1010.0
    assert summary["size_class"] == "small"
    assert "Lesions detected: 1" in text
    assert "Tumor-to-liver volume ratio: 0.00794" in text


def test_lesions_sorted_by_diameter():
    liver, tumor = _masks(
        (30, 30, 30), np.s_[0:30, 0:30, 0:30],
        [np.s_[2:5, 2:5, 2:5], np.s_[10:20, 10:12, 10:12]], (1.0, 1.0, 1.0))
    found = lesions(tumor.foreground(), tumor.spacing)
    assert [lesion["voxels"] for lesion in found] == [40, 27]
    assert found[0]["diameter_cm"] == pytest.approx(1.0)
    _, summary = emit_report(liver, tumor)
    assert summary["largest_diameter_cm"] == 1.0


def test_diagonal_voxels_form_one_lesion():
    tumor = np.zeros((5, 5, 5), dtype=bool)
    tumor[1, 1, 1] = tumor[2, 2, 2] = True
    assert len(lesions(tumor, (1.0, 1.0, 1.0))) == 1


def test_report_is_deterministic():
    liver, tumor = _masks(
        (20, 20, 20), np.s_[2:18, 2:18, 2:18], [np.s_[4:8, 4:8, 4:8]], (1.5, 1.5, 3.0))
    assert emit_report(liver, tumor)[0] == emit_report(liver, tumor)[0]


def test_record_is_echoed(tmp_path):
    liver, tumor = _masks((8, 8, 8), np.s_[1:7, 1:7, 1:7], [np.s_[2:4, 2:4, 2:4]], (1.0, 1.0, 1.0))
    record = ClinicalRecord("p-01", {"age": 61.0, "afp": float("nan")})
    text, summary = emit_report(liver, tumor, record=record)
    assert text.startswith("Patient: p-01\n")
    assert summary["clinical"] == {"age": 61.0}
    write_report(text, summary, tmp_path / "out", stem="p-01")
    assert (tmp_path / "out" / "p-01.txt").read_text(encoding="utf-8") == text
    assert json.loads((tmp_path / "out" / "p-01.json").read_text(encoding="utf-8")) == summary


def test_misaligned_masks():
    liver = Mask(np.zeros((4, 4, 4), dtype=np.uint8))
    tumor = Mask(np.zeros((4, 4, 5), dtype=np.uint8))
    with pytest.raises(ShapeMismatch):
        emit_report(liver, tumor)
