"""
metrics.py

Evaluation suite: accuracy, Dice, IoU and sensitivity per class per volume,
tumor size stratification and cohort aggregation.

A metric whose denominator is zero is undefined and reported as None; cohort
means skip undefined values instead of counting them as zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import IoError, OutOfRange
from .volio import LABEL_LIVER, LABEL_TUMOR, check_aligned

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "dice", "sensitivity", "iou")
COHORT_COLUMNS = ("method", "class", *METRIC_NAMES)

LARGE_VOLUME_CM3 = 500.0
LARGE_DIAMETER_CM = 10.0

# liver is evaluated on the whole organ, tumor included
CLASS_LABELS = {
    "liver": (LABEL_LIVER, LABEL_TUMOR),
    "tumor": (LABEL_TUMOR,),
}


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxel counts of a binary class-vs-rest comparison."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise OutOfRange(f"confusion counts must be non-negative: {self}")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """
    Scores of one volume.

    Attributes:
        classes (dict): class name -> {metric: value or None}.
        size_class (str): "small", "large" or "n/a" under the mode the case
            was evaluated with.
        tumor_volume_cm3 (float): ground-truth tumor volume.
        tumor_diameter_cm (float): ground-truth tumor extent along its longest axis.
    """

    classes: dict
    size_class: str = "n/a"
    tumor_volume_cm3: float = 0.0
    tumor_diameter_cm: float = 0.0

    def size_class_by(self, mode):
        """Size class under `mode` ("volume" or "diameter")."""
        if mode == "diameter":
            return stratify(self.tumor_diameter_cm, mode)
        return stratify(self.tumor_volume_cm3, mode)


def _class_labels(cls):
    if isinstance(cls, str):
        return CLASS_LABELS[cls]
    if isinstance(cls, (int, np.integer)):
        return (int(cls),)
    return tuple(cls)


def confusion(pred, gt, cls):
    """
    Count tp/tn/fp/fn for `cls` against the rest.

    Args:
        pred, gt (Mask): aligned masks.
        cls: class name ("liver", "tumor"), a label or a collection of labels.
    """
    check_aligned(pred, gt)
    labels = _class_labels(cls)
    p = pred.foreground(labels)
    g = gt.foreground(labels)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(numerator, denominator):
    return None if denominator == 0 else numerator / denominator


def scores(c):
    """accuracy, dice, iou, sensitivity; None where the denominator is 0."""
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
    }


# ______________________________________________________________________________
# Tumor size


def tumor_volume_cm3(mask, spacing=None, labels=(LABEL_TUMOR,)):
    """Foreground count times voxel volume, in cm^3."""
    spacing = mask.spacing if spacing is None else spacing
    if min(spacing) <= 0:
        raise OutOfRange(f"spacing must be positive, got {spacing}")
    return mask.count(labels) * float(np.prod(spacing)) / 1000.0


def max_diameter_cm(mask, spacing=None, labels=(LABEL_TUMOR,)):
    """Largest axis-aligned extent of the foreground, in cm (0 when empty)."""
    spacing = mask.spacing if spacing is None else spacing
    coords = np.argwhere(mask.foreground(labels))
    if coords.size == 0:
        return 0.0
    extents = (coords.max(axis=0) - coords.min(axis=0) + 1) * np.asarray(spacing, dtype=np.float64)
    return float(extents.max()) / 10.0


def stratify(value, mode="volume"):
    """
    Size class of a tumor measure.

    Args:
        value (float): volume in cm^3 (mode "volume") or diameter in cm
            (mode "diameter").

    Returns:
        str: "large", "small", or "n/a" for an empty tumor.
    """
    if mode not in ("volume", "diameter"):
        raise OutOfRange(f"unknown stratification mode {mode!r}")
    if value <= 0:
        return "n/a"
    threshold = LARGE_VOLUME_CM3 if mode == "volume" else LARGE_DIAMETER_CM
    return "large" if value >= threshold else "small"


# ______________________________________________________________________________
# Cohorts


def evaluate_case(pred_liver, pred_tumor, gt_liver, gt_tumor, mode="volume"):
    """
    Score one case for both classes.

    The liver class covers liver and tumor labels of the liver masks; the
    tumor class uses the tumor masks. The size class comes from the
    ground-truth tumor.
    """
    classes = {
        "liver": scores(confusion(pred_liver, gt_liver, "liver")),
        "tumor": scores(confusion(pred_tumor, gt_tumor, "tumor")),
    }
    volume = tumor_volume_cm3(gt_tumor)
    diameter = max_diameter_cm(gt_tumor)
    measure = volume if mode == "volume" else diameter
    return MetricsReport(classes, stratify(measure, mode), volume, diameter)


def aggregate(values):
    """
    Mean and sample standard deviation of the defined values.

    Returns:
        tuple: (mean, std, n); mean is None when nothing is defined and std
        is None below two values.
    """
    series = pd.Series([v for v in values if v is not None], dtype=np.float64)
    if series.empty:
        return None, None, 0
    std = float(series.std(ddof=1)) if len(series) > 1 else None
    return float(series.mean()), std, int(len(series))


def cohort_frame(results):
    """
    Long table of per-case scores.

    Args:
        results (list): (method, MetricsReport) pairs.
    """
    rows = []
    for case, (method, report) in enumerate(results):
        for cls, values in report.classes.items():
            rows.append({"method": method, "case": case, "class": cls,
                         "size_class": report.size_class, **values})
    return pd.DataFrame(rows, columns=["method", "case", "class", "size_class", *METRIC_NAMES])


def summarize(results):
    """
    One row per (method, class) with the mean of every metric.

    Rows keep first-appearance order of methods and classes.
    """
    frame = cohort_frame(results)
    rows = []
    for (method, cls), group in frame.groupby(["method", "class"], sort=False):
        row = {"method": method, "class": cls}
        for name in METRIC_NAMES:
            mean, std, _ = aggregate(group[name].tolist())
            row[name] = mean
            row[f"{name}_std"] = std
        rows.append(row)
    return pd.DataFrame(rows)


def stratified_table(reports, mode="volume"):
    """
    Tumor metric means for all cases, large tumors and small tumors.

    Args:
        reports (list): MetricsReports of one method.
        mode (str): "volume" or "diameter"; each case is classed from its
            stored ground-truth measures.
    """
    classes = [r.size_class_by(mode) for r in reports]
    rows = []
    for group in ("all", "large", "small"):
        chosen = [r for r, c in zip(reports, classes) if group == "all" or c == group]
        row = {"group": group, "cases": len(chosen)}
        for name in METRIC_NAMES:
            row[name] = aggregate([r.classes["tumor"][name] for r in chosen])[0]
        rows.append(row)
    logger.debug("stratified %d reports by %s", len(reports), mode)
    return pd.DataFrame(rows, columns=["group", "cases", *METRIC_NAMES])


def write_cohort_csv(results, path):
    """Write the (method, class, accuracy, dice, sensitivity, iou) mean table."""
    table = summarize(results)
    table = table.reindex(columns=list(COHORT_COLUMNS))
    try:
        table.to_csv(path, index=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return table
