"""
report.py

Rule-based diagnostic summary of a segmentation.

The report lists every tumor component (26-connected) with its volume and
largest axis-aligned diameter, the tumor-to-liver volume ratio and the size
class of the total tumor burden. The text comes from a fixed template so the
same masks always give the same report.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IoError
from .metrics import stratify
from .postprocess import FULL_CONNECTIVITY
from .volio import LABEL_TUMOR, check_aligned

logger = logging.getLogger(__name__)


def significant(value, digits=3):
    """Round to `digits` significant figures."""
    return float(f"{value:.{digits}g}")


def lesions(tumor, spacing):
    """
    Tumor components sorted by decreasing diameter.

    Returns:
        list: dicts with volume_cm3, diameter_cm and voxel count.
    """
    components, count = ndimage.label(tumor, structure=FULL_CONNECTIVITY)
    voxel_cm3 = float(np.prod(spacing)) / 1000.0
    found = []
    for index, box in enumerate(ndimage.find_objects(components), start=1):
        if box is None:
            continue
        inside = components[box] == index
        voxels = int(np.count_nonzero(inside))
        extent = np.array([s.stop - s.start for s in box], dtype=np.float64)
        found.append({
            "voxels": voxels,
            "volume_cm3": voxels * voxel_cm3,
            "diameter_cm": float(np.max(extent * np.asarray(spacing))) / 10.0,
        })
    found.sort(key=lambda lesion: (-lesion["diameter_cm"], -lesion["voxels"]))
    logger.debug("found %d lesions", count)
    return found


def summarize_case(liver, tumor, spacing=None, record=None):
    """
    Structured summary of one case.

    Args:
        liver (Mask): organ mask (liver and tumor labels both count as organ).
        tumor (Mask): tumor mask.
        spacing (tuple): voxel size in mm (default: the mask spacing).
        record (ClinicalRecord): optional, only echoed into the summary.

    Returns:
        dict: JSON-ready summary.
    """
    check_aligned(liver, tumor)
    spacing = tuple(liver.spacing if spacing is None else spacing)
    tumor_voxels = tumor.foreground(LABEL_TUMOR)
    liver_only = liver.foreground() & ~tumor_voxels
    n_tumor = int(np.count_nonzero(tumor_voxels))
    n_liver = int(np.count_nonzero(liver_only))
    tlvr = n_tumor / (n_tumor + n_liver) if n_tumor + n_liver else 0.0

    found = lesions(tumor_voxels, spacing)
    total = sum(lesion["volume_cm3"] for lesion in found)
    summary = {
        "lesion_count": len(found),
        "lesions": [
            {"volume_cm3": significant(lesion["volume_cm3"]),
             "diameter_cm": significant(lesion["diameter_cm"])}
            for lesion in found
        ],
        "total_tumor_volume_cm3": significant(total),
        "liver_volume_cm3": significant((n_liver + n_tumor) * float(np.prod(spacing)) / 1000.0),
        "largest_diameter_cm": significant(found[0]["diameter_cm"]) if found else 0.0,
        "tlvr": significant(tlvr),
        "size_class": stratify(total, "volume"),
    }
    if record is not None:
        summary["patient_id"] = record.patient_id
        summary["clinical"] = {
            name: value for name, value in record.features.items() if not record.is_missing(name)
        }
    return summary


def render_text(summary):
    """Fixed-template text of a summary."""
    lines = []
    if "patient_id" in summary:
        lines.append(f"Patient: {summary['patient_id']}")
    if summary["lesion_count"] == 0:
        lines.append("No lesion detected.")
    else:
        lines.append(f"Lesions detected: {summary['lesion_count']}")
        for k, lesion in enumerate(summary["lesions"], start=1):
            lines.append(f"  {k}. volume {lesion['volume_cm3']:g} cm3, "
                         f"largest diameter {lesion['diameter_cm']:g} cm")
        lines.append(f"Largest lesion diameter: {summary['largest_diameter_cm']:g} cm")
        lines.append(f"Total tumor volume: {summary['total_tumor_volume_cm3']:g} cm3")
    lines.append(f"Liver volume: {summary['liver_volume_cm3']:g} cm3")
    lines.append(f"Tumor-to-liver volume ratio: {summary['tlvr']:g}")
    lines.append(f"Tumor size class: {summary['size_class']}")
    return "\n".join(lines) + "\n"


def emit_report(liver, tumor, spacing=None, record=None):
    """
    Text and structured summary of a segmentation.

    Returns:
        tuple: (text, summary dict)
    """
    summary = summarize_case(liver, tumor, spacing, record)
    return render_text(summary), summary


def write_report(text, summary, directory, stem="report"):
    """Write <stem>.txt and <stem>.json (sorted keys) into `directory`."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.txt").write_text(text, encoding="utf-8")
        (directory / f"{stem}.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report to {directory}: {exc}") from exc
