"""
clinical.py

Knowledge extraction from clinical data.

 - compute_tlvr: tumor-to-liver volume ratio of a pair of masks.
 - fit_linear: ordinary least squares on standardized features (ridge jitter
   1e-8 on the Gram diagonal), mean imputation of missing values.
 - select_features: rank by |standardized coefficient|, choose the top-n by
   k-fold cross-validated Pearson correlation, refit.
 - predict_tlvr: clamped prediction used as the weak label.

All statistics used by a fit (imputation means, standardization) are taken
from the records passed to that fit only, so cross-validation never sees
statistics of its held-out fold.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.model_selection import KFold

from .errors import DegenerateDesignWarning, IoError, TooFewSamples
from .volio import LABEL_LIVER, LABEL_TUMOR, check_aligned

logger = logging.getLogger(__name__)

RIDGE_JITTER = 1e-8
NON_INFORMATIVE_PEARSON = 0.3


@dataclass(frozen=True)
class TlvrLabel:
    """Observed ratio (from masks) and predicted ratio (from clinical data)."""

    patient_id: str
    r_true: float
    r_hat: float


@dataclass(frozen=True, eq=False)
class LinearModel:
    """
    Linear regression on standardized features.

    prediction = intercept + sum_j coefficients[j] * (x_j - means[j]) / stds[j]

    Attributes:
        selected_features (tuple): ordered feature names.
        coefficients (np.ndarray): standardized coefficients, one per feature.
        intercept (float): mean training label (the standardized intercept).
        means (np.ndarray): training means; also used to impute missing values.
        stds (np.ndarray): training standard deviations (all > 0).
        dropped (tuple): requested features dropped as constant.
    """

    selected_features: tuple
    coefficients: np.ndarray
    intercept: float
    means: np.ndarray
    stds: np.ndarray
    dropped: tuple = field(default_factory=tuple)

    @property
    def raw_coefficients(self):
        """Coefficients in the original feature units."""
        return self.coefficients / self.stds

    @property
    def raw_intercept(self):
        return float(self.intercept - np.sum(self.coefficients * self.means / self.stds))

    def coefficient_table(self):
        return pd.DataFrame({
            "feature": list(self.selected_features),
            "coefficient": self.raw_coefficients,
            "standardized_coefficient": self.coefficients,
        })

    def to_dict(self):
        return {
            "selected_features": list(self.selected_features),
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            tuple(payload["selected_features"]),
            np.asarray(payload["coefficients"], dtype=np.float64),
            float(payload["intercept"]),
            np.asarray(payload["means"], dtype=np.float64),
            np.asarray(payload["stds"], dtype=np.float64),
            tuple(payload.get("dropped", ())),
        )


@dataclass(frozen=True)
class SelectionReport:
    """
    Outcome of select_features.

    Attributes:
        ranking (tuple): features by decreasing |standardized coefficient|.
        curve (tuple): (n, cv_pearson) for every n tried.
        best_n (int): chosen number of features.
        best_pearson (float): cross-validated Pearson at best_n.
        informative (bool): False when |best_pearson| < 0.3.
    """

    ranking: tuple
    curve: tuple
    best_n: int
    best_pearson: float
    informative: bool

    @property
    def selected(self):
        return self.ranking[:self.best_n]


# ______________________________________________________________________________
# TLVR


def compute_tlvr(liver, tumor):
    """
    |tumor voxels| / (|liver voxels| + |tumor voxels|).

    Liver voxels are those labelled liver in `liver`, tumor voxels those
    labelled tumor in `tumor`; the two counts are independent. Returns 0
    when both are empty.
    """
    check_aligned(liver, tumor)
    n_tumor = tumor.count(LABEL_TUMOR)
    n_liver = liver.count(LABEL_LIVER)
    if n_tumor + n_liver == 0:
        return 0.0
    return n_tumor / (n_liver + n_tumor)


# ______________________________________________________________________________
# Linear regression


def _raw_design(records, names):
    return np.array([record.vector(names) for record in records], dtype=np.float64).reshape(
        len(records), len(names))


def _column_means(design):
    present = ~np.isnan(design)
    counts = present.sum(axis=0)
    sums = np.where(present, design, 0.0).sum(axis=0)
    return np.divide(sums, counts, out=np.zeros(design.shape[1]), where=counts > 0)


def _impute(design, means):
    return np.where(np.isnan(design), means, design)


def fit_linear(records, labels, features=None, ridge=RIDGE_JITTER):
    """
    Fit OLS with intercept on standardized features.

    Args:
        records (list): ClinicalRecords.
        labels (list): one real target per record.
        features (sequence): feature names to use (default: all names of
            the first record).
        ridge (float): jitter added to the Gram diagonal.

    Returns:
        LinearModel. Features constant after imputation are dropped with a
        DegenerateDesignWarning.

    Raises:
        TooFewSamples: fewer than two records or a label count mismatch.
    """
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if len(records) < 2 or len(records) != labels.size:
        raise TooFewSamples(f"need >= 2 records with one label each, got {len(records)} / {labels.size}")
    names = tuple(features) if features is not None else tuple(records[0].feature_names)

    design = _raw_design(records, names)
    means = _column_means(design)
    design = _impute(design, means)
    stds = design.std(axis=0)
    keep = stds > 1e-12 * np.maximum(1.0, np.abs(means))
    dropped = tuple(n for n, k in zip(names, keep) if not k)
    if dropped:
        message = f"dropping constant features: {', '.join(dropped)}"
        logger.warning(message)
        warnings.warn(message, DegenerateDesignWarning, stacklevel=2)

    means, stds = means[keep], stds[keep]
    z = (design[:, keep] - means) / stds
    y_mean = float(labels.mean())
    gram = z.T @ z + ridge * np.eye(z.shape[1])
    coefficients = np.linalg.solve(gram, z.T @ (labels - y_mean)) if z.shape[1] else np.zeros(0)

    return LinearModel(
        tuple(n for n, k in zip(names, keep) if k),
        coefficients,
        y_mean,
        means,
        stds,
        dropped,
    )


def predict_raw(model, records):
    """Unclamped predictions for a list of records (missing -> training mean)."""
    design = _impute(_raw_design(records, model.selected_features), model.means)
    if not model.selected_features:
        return np.full(len(records), model.intercept)
    return model.intercept + ((design - model.means) / model.stds) @ model.coefficients


def predict_tlvr(model, record):
    """R-hat for one record, clamped to [0, 1]."""
    return float(np.clip(predict_raw(model, [record])[0], 0.0, 1.0))


def pearson(a, b):
    """Pearson correlation; 0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.std(a) == 0.0 or np.std(b) == 0.0:
        return 0.0
    return float(stats.pearsonr(a, b)[0])


def regression_summary(r_true, r_hat):
    """MSE, MAE and Pearson between observed and predicted ratios."""
    r_true = np.asarray(r_true, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    return {
        "mse": float(np.mean((r_true - r_hat) ** 2)),
        "mae": float(np.mean(np.abs(r_true - r_hat))),
        "pearson": pearson(r_true, r_hat),
    }


# ______________________________________________________________________________
# Feature selection


def fold_indices(n_records, k_folds=5, seed=0):
    """Seed-deterministic shuffled k-fold split: list of (train, test) index arrays."""
    splitter = KFold(n_splits=k_folds, shuffle=True, random_state=seed)
    return list(splitter.split(np.arange(n_records)))


def cross_val_predict(records, labels, features, k_folds=5, seed=0):
    """Out-of-fold unclamped predictions; each fold fits on its training part only."""
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.empty(len(records))
    for train, test in fold_indices(len(records), k_folds, seed):
        model = fit_linear([records[i] for i in train], labels[train], features)
        predictions[test] = predict_raw(model, [records[i] for i in test])
    return predictions


def select_features(records, labels, k_folds=5, n_grid=None, seed=0):
    """
    Choose the number of top-ranked features by cross-validated Pearson.

    Args:
        records (list): ClinicalRecords.
        labels (list): observed TLVR per record.
        k_folds (int): folds for cross-validation.
        n_grid (iterable): candidate numbers of features (default 1..all).
        seed (int): fold assignment seed.

    Returns:
        tuple: (LinearModel refitted on all records with the top-n features,
        SelectionReport).

    Raises:
        TooFewSamples: fewer records than folds.
    """
    if len(records) < max(k_folds, 2):
        raise TooFewSamples(f"{len(records)} records cannot be split into {k_folds} folds")
    labels = np.asarray(labels, dtype=np.float64)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDesignWarning)
        full = fit_linear(records, labels)
    order = np.argsort(-np.abs(full.coefficients), kind="stable")
    ranking = tuple(full.selected_features[i] for i in order)

    grid = range(1, len(ranking) + 1) if n_grid is None else n_grid
    grid = sorted({int(n) for n in grid if 1 <= int(n) <= len(ranking)})
    if not grid:
        raise TooFewSamples("no usable feature count in n_grid")

    curve = []
    best_n, best_r = grid[0], -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDesignWarning)
        for n in grid:
            oof = cross_val_predict(records, labels, ranking[:n], k_folds, seed)
            r = pearson(labels, oof)
            curve.append((n, r))
            logger.debug("top-%d features: cv pearson %.4f", n, r)
            if r > best_r:
                best_n, best_r = n, r

    model = fit_linear(records, labels, ranking[:best_n])
    informative = abs(best_r) >= NON_INFORMATIVE_PEARSON
    if not informative:
        logger.warning("clinical model is not informative (cv pearson %.3f)", best_r)
    logger.info("selected %d features, cv pearson %.4f", best_n, best_r)
    return model, SelectionReport(ranking, tuple(curve), best_n, float(best_r), informative)


# ______________________________________________________________________________
# Weak labels and tables


def tlvr_labels(records, livers, tumors, model):
    """Pair each record's observed TLVR with its clinical prediction."""
    return [
        TlvrLabel(record.patient_id, compute_tlvr(liver, tumor), predict_tlvr(model, record))
        for record, liver, tumor in zip(records, livers, tumors)
    ]


def _write_table(table, path):
    try:
        table.to_csv(path, index=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_selection_csv(report, path):
    _write_table(pd.DataFrame(list(report.curve), columns=["n", "cv_pearson"]), path)


def write_coefficients_csv(model, path):
    _write_table(model.coefficient_table(), path)


def save_model(model, path):
    try:
        Path(path).write_text(json.dumps(model.to_dict(), indent=2), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path):
    try:
        return LinearModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
