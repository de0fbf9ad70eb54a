"""
pipeline.py

Two-step global/local segmentation and the experiments built on it.

 - run_two_step: liver from the whole volume, then tumor inside the liver
   crop. Inference takes only the image and the two parameter sets; no
   clinical input reaches it.
 - liver_samples / tumor_samples / train_two_step: training data and models.
   The tumor model trains on crops delineated by the ground-truth liver and,
   when a clinical model is given, with the predicted TLVR as weak label.
 - run_ablation: single multi-class model against the two-step variants
   with and without knowledge-informed label smoothing and contour
   refinement.
 - run_smoothing_experiment: training curves with and without the weak
   loss on a small noisy-label training set.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from .clinical import compute_tlvr, fit_linear, predict_tlvr, select_features
from .config import PipelineConfig
from .errors import EmptyLiverPredictionWarning, EmptyMask, IoError
from .metrics import evaluate_case, summarize, write_cohort_csv
from .phantom import perturb_labels
from .postprocess import fill_holes, largest_component, run_active_contour
from .preprocess import (
    Center,
    apply_crop,
    preprocess_liver,
    preprocess_tumor,
    standardize_orientation,
    tile_placements,
    uncrop,
    window_and_normalize,
)
from .segmenter import (
    TrainingSample,
    extract_features,
    predict,
    predict_multiclass,
    train,
    train_multiclass,
    write_curves_csv,
)
from .volio import LABEL_BACKGROUND, LABEL_LIVER, LABEL_TUMOR, Mask

logger = logging.getLogger(__name__)

VARIANTS = (
    "multiclass-proxy",
    "two_step",
    "two_step+smoothing",
    "two_step+contour",
    "two_step+both",
)


@dataclass(frozen=True, eq=False)
class TwoStepModel:
    """Parameters of the global (liver) and local (tumor) segmenters."""

    liver: object
    tumor: object


@dataclass(frozen=True, eq=False)
class TwoStepResult:
    """
    Output of run_two_step, in the standardized (R, A, S) frame.

    Attributes:
        liver (Mask): organ mask; liver tissue LIVER, predicted tumor TUMOR.
        tumor (Mask): tumor mask (TUMOR only).
        metrics (MetricsReport): scores when ground truth was supplied.
    """

    liver: Mask
    tumor: Mask
    metrics: object = None


# ______________________________________________________________________________
# Inference


def _liver_tiles(volume, cfg):
    """Normalized liver-window tiles covering the oriented volume."""
    oriented = standardize_orientation(volume)
    normalized = window_and_normalize(oriented, cfg.window("liver"))
    for placement in tile_placements(normalized.dims, cfg.liver_crop):
        yield apply_crop(normalized, placement), placement


def segment_liver(volume, liver_params, cfg=PipelineConfig()):
    """
    Global branch: predict, keep the largest component, fill holes.

    A volume larger than the liver crop is predicted tile by tile; the
    coordinate features of each tile are relative to that tile, as they are
    to the training crop.
    """
    oriented = standardize_orientation(volume)
    foreground = np.zeros(oriented.dims, dtype=bool)
    for crop, placement in _liver_tiles(oriented, cfg):
        predicted = predict(liver_params, crop, cfg.threshold, LABEL_LIVER, include_y=True)
        foreground |= uncrop(predicted.foreground(), placement)
    liver = largest_component(Mask.from_bool(foreground, oriented, LABEL_LIVER), LABEL_LIVER)
    return fill_holes(liver, LABEL_LIVER)


def _contour_intensity(crop):
    smoothed = ndimage.gaussian_filter(crop.data.astype(np.float64), sigma=1.0, mode="nearest")
    return crop.with_data(np.clip(smoothed, 0.0, 1.0))


def segment_tumor(volume, liver, tumor_params, cfg=PipelineConfig(), contour=True):
    """
    Local branch inside a given liver mask.

    Returns:
        Mask: tumor (TUMOR only) on the standardized grid of `volume`.
    """
    crop, placement = preprocess_tumor(volume, liver, cfg.window("tumor"), cfg.tumor_crop,
                                       cfg.bbox_margin, Center())
    organ = apply_crop(standardize_orientation(liver), placement).foreground()
    predicted = predict(tumor_params, crop, cfg.threshold, LABEL_TUMOR)
    tumor = predicted.foreground() & organ

    contour_cfg = cfg.contour()
    if contour and contour_cfg.iterations > 0 and tumor.any() and (organ & ~tumor).any():
        init = Mask.from_bool(tumor, predicted, LABEL_TUMOR)
        try:
            trace = run_active_contour(_contour_intensity(crop), init, contour_cfg, domain=organ)
            tumor = trace.mask.foreground()
        except EmptyMask:
            logger.debug("contour skipped: prediction fills the liver")

    tumor_crop = Mask.from_bool(tumor, predicted, LABEL_TUMOR)
    return uncrop(tumor_crop, placement, like=standardize_orientation(volume))


def run_two_step(volume, liver_params, tumor_params, cfg=PipelineConfig(), contour=True,
                 ground_truth=None, liver_mask=None):
    """
    Two-step inference on one HU volume.

    Args:
        volume (Volume): HU image.
        liver_params, tumor_params (SegmenterParams): trained models.
        cfg (PipelineConfig): windows, crops, threshold, contour settings.
        contour (bool): refine the tumor with the active contour.
        ground_truth (tuple): optional (liver Mask, tumor Mask) for scoring.
        liver_mask (Mask): use this liver instead of the predicted one.

    Returns:
        TwoStepResult. An empty liver prediction yields an empty tumor mask
        and an EmptyLiverPredictionWarning.
    """
    oriented = standardize_orientation(volume)
    if liver_mask is None:
        liver = segment_liver(oriented, liver_params, cfg)
    else:
        liver = standardize_orientation(liver_mask)

    if liver.count() == 0:
        message = "no liver predicted; tumor branch skipped"
        logger.warning(message)
        warnings.warn(message, EmptyLiverPredictionWarning, stacklevel=2)
        tumor = Mask(np.zeros(oriented.dims, dtype=np.uint8), oriented.spacing, oriented.orientation)
    else:
        tumor = segment_tumor(oriented, liver, tumor_params, cfg, contour)

    organ = np.where(liver.foreground(), LABEL_LIVER, LABEL_BACKGROUND)
    labels = np.where(tumor.foreground(), LABEL_TUMOR, organ).astype(np.uint8)
    combined = Mask(labels, oriented.spacing, oriented.orientation)

    report = None
    if ground_truth is not None:
        gt_liver, gt_tumor = (standardize_orientation(m) for m in ground_truth)
        report = evaluate_case(combined, tumor, gt_liver, gt_tumor)
    return TwoStepResult(combined, tumor, report)


# ______________________________________________________________________________
# Training data


def liver_samples(cases, cfg=PipelineConfig()):
    """Whole-volume samples: liver organ (liver + tumor labels) vs rest."""
    samples = []
    for case in cases:
        crop, placement, _ = preprocess_liver(case.volume, cfg.window("liver"), cfg.liver_crop)
        target = apply_crop(standardize_orientation(case.liver), placement).foreground()
        samples.append(TrainingSample(extract_features(crop, include_y=True), target,
                                      name=case.patient_id))
    return samples


def tumor_samples(cases, cfg=PipelineConfig(), r_hats=None, tumors=None):
    """
    Liver-crop samples for the tumor model.

    Args:
        cases (list): PhantomCases.
        r_hats (list): weak labels per case, or None for no weak term.
        tumors (list): training tumor masks replacing the case masks
            (label noise).
    """
    samples = []
    for k, case in enumerate(cases):
        crop, placement = preprocess_tumor(case.volume, case.liver, cfg.window("tumor"),
                                           cfg.tumor_crop, cfg.bbox_margin, Center())
        tumor = case.tumor if tumors is None else tumors[k]
        target = apply_crop(standardize_orientation(tumor), placement).foreground(LABEL_TUMOR)
        region = apply_crop(standardize_orientation(case.liver), placement).foreground()
        r_hat = None if r_hats is None else float(r_hats[k])
        samples.append(TrainingSample(extract_features(crop), target, region, r_hat, case.patient_id))
    return samples


def fit_clinical(cases, cfg=PipelineConfig()):
    """
    Clinical TLVR model of a cohort.

    Uses cross-validated feature selection when the cohort allows k folds,
    else a plain fit on every feature.

    Returns:
        tuple: (LinearModel, SelectionReport or None)
    """
    records = [c.record for c in cases]
    labels = [compute_tlvr(c.liver, c.tumor) for c in cases]
    if len(records) >= max(cfg.k_folds, 2) * 2:
        return select_features(records, labels, cfg.k_folds, seed=cfg.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_linear(records, labels), None


def weak_labels(cases, clinical_model):
    """Clamped clinical TLVR predictions of each case."""
    return [predict_tlvr(clinical_model, c.record) for c in cases]


def noisy_tumors(cases, seed, radius=1, p=0.5):
    """Seeded dilation/erosion of every case's tumor mask."""
    rng = np.random.default_rng(seed)
    return [perturb_labels(c.tumor, rng, radius, p) for c in cases]


def train_liver(cases, val_cases=(), cfg=PipelineConfig(), seed=None):
    samples = liver_samples(cases, cfg)
    val = liver_samples(val_cases, cfg) if val_cases else []
    return train(samples, val, cfg.training(lambda_weak=0.0, seed=seed))


def train_tumor(cases, val_cases=(), cfg=PipelineConfig(), r_hats=None, tumors=None,
                lambda_weak=None, seed=None):
    """
    Train the local model.

    Without r_hats the weak term is off regardless of lambda_weak.
    """
    weak = cfg.lambda_weak if lambda_weak is None else lambda_weak
    if r_hats is None:
        weak = 0.0
    samples = tumor_samples(cases, cfg, r_hats if weak > 0 else None, tumors)
    val = tumor_samples(val_cases, cfg) if val_cases else []
    return train(samples, val, cfg.training(lambda_weak=weak, seed=seed))


def train_two_step(cases, val_cases=(), cfg=PipelineConfig(), clinical_model=None):
    """
    Train both models.

    Returns:
        tuple: (TwoStepModel, liver TrainingCurves, tumor TrainingCurves)
    """
    liver, liver_curves = train_liver(cases, val_cases, cfg)
    r_hats = weak_labels(cases, clinical_model) if clinical_model is not None else None
    tumor, tumor_curves = train_tumor(cases, val_cases, cfg, r_hats)
    return TwoStepModel(liver, tumor), liver_curves, tumor_curves


# ______________________________________________________________________________
# Multi-class baseline


def multiclass_dataset(cases, cfg=PipelineConfig(), tumors=None):
    dataset = []
    for k, case in enumerate(cases):
        crop, placement, _ = preprocess_liver(case.volume, cfg.window("liver"), cfg.liver_crop)
        liver = apply_crop(standardize_orientation(case.liver), placement)
        tumor_mask = case.tumor if tumors is None else tumors[k]
        tumor = apply_crop(standardize_orientation(tumor_mask), placement).foreground(LABEL_TUMOR)
        labels = np.where(tumor, LABEL_TUMOR,
                          np.where(liver.foreground(), LABEL_LIVER, LABEL_BACKGROUND))
        dataset.append((extract_features(crop, include_y=True), labels))
    return dataset


def run_multiclass(volume, params, cfg=PipelineConfig(), ground_truth=None):
    """Single-model segmentation: arg-max over background/liver/tumor, tile by tile."""
    oriented = standardize_orientation(volume)
    full = np.full(oriented.dims, LABEL_BACKGROUND, dtype=np.uint8)
    for crop, placement in _liver_tiles(oriented, cfg):
        labels = predict_multiclass(params, extract_features(crop, include_y=True))
        covered = uncrop(np.ones(placement.target, dtype=bool), placement)
        full[covered] = uncrop(labels, placement)[covered]
    combined = Mask(full, oriented.spacing, oriented.orientation)
    tumor = Mask.from_bool(full == LABEL_TUMOR, combined, LABEL_TUMOR)
    report = None
    if ground_truth is not None:
        gt_liver, gt_tumor = (standardize_orientation(m) for m in ground_truth)
        report = evaluate_case(combined, tumor, gt_liver, gt_tumor)
    return TwoStepResult(combined, tumor, report)


# ______________________________________________________________________________
# Experiments


@dataclass
class AblationResult:
    """Per-case reports with their variant and seed, plus the mean table."""

    rows: list = field(default_factory=list)
    table: pd.DataFrame = None

    def reports(self, variant=None):
        return [(v, r) for _, v, r in self.rows if variant is None or v == variant]

    def mean(self, variant, metric="dice", cls="tumor"):
        values = [r.classes[cls][metric] for _, v, r in self.rows if v == variant]
        values = [x for x in values if x is not None]
        return float(np.mean(values)) if values else float("nan")


def run_ablation(train_cases, test_cases, cfg=PipelineConfig(), seeds=(0,), clinical_model=None,
                 label_noise=True, variants=VARIANTS, path=None):
    """
    Train every variant with identical seeds and score it on the test cases.

    Args:
        train_cases, test_cases (list): PhantomCases (at least 2 each).
        cfg (PipelineConfig): shared settings.
        seeds (iterable): one full training round per seed.
        clinical_model (LinearModel): weak-label source; fitted on the
            training cases when None.
        label_noise (bool): perturb training tumor labels.
        variants (tuple): subset of VARIANTS.
        path: optional cohort CSV destination.

    Returns:
        AblationResult
    """
    if len(train_cases) < 2 or len(test_cases) < 2:
        raise ValueError("ablation needs at least 2 training and 2 test phantoms")
    if clinical_model is None:
        clinical_model, _ = fit_clinical(train_cases, cfg)
    r_hats = weak_labels(train_cases, clinical_model)
    result = AblationResult()

    for seed in seeds:
        tumors = noisy_tumors(train_cases, seed) if label_noise else None
        liver, _ = train_liver(train_cases, (), cfg, seed=seed)
        plain, _ = train_tumor(train_cases, (), cfg, tumors=tumors, lambda_weak=0.0, seed=seed)
        smoothed, _ = train_tumor(train_cases, (), cfg, r_hats, tumors, seed=seed)
        multiclass = None
        if "multiclass-proxy" in variants:
            multiclass, _ = train_multiclass(multiclass_dataset(train_cases, cfg, tumors),
                                             cfg.training(seed=seed))
        arms = {
            "two_step": (plain, False),
            "two_step+smoothing": (smoothed, False),
            "two_step+contour": (plain, True),
            "two_step+both": (smoothed, True),
        }
        for case in test_cases:
            truth = (case.liver, case.tumor)
            for variant in variants:
                if variant == "multiclass-proxy":
                    outcome = run_multiclass(case.volume, multiclass, cfg, truth)
                else:
                    tumor_params, contour = arms[variant]
                    outcome = run_two_step(case.volume, liver, tumor_params, cfg, contour, truth)
                result.rows.append((seed, variant, outcome.metrics))
        logger.info("ablation seed %d done", seed)

    pairs = [(v, r) for _, v, r in result.rows]
    result.table = write_cohort_csv(pairs, path) if path is not None else summarize(pairs)
    return result


@dataclass
class SmoothingExperiment:
    """Curves keyed by (seed, lambda_weak) and the directional summary."""

    curves: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def frame(self):
        rows = []
        for (seed, weak), curves in self.curves.items():
            rows.append({
                "seed": seed,
                "lambda_weak": weak,
                "final_train_loss": curves.total[-1],
                "final_val_dice": curves.val_dice[-1],
                "best_val_dice": max(curves.val_dice),
            })
        return pd.DataFrame(rows)


def run_smoothing_experiment(train_cases, val_cases, cfg=PipelineConfig(), seeds=(0, 1, 2, 3, 4),
                             clinical_model=None, weights=(0.0, 0.5), out_dir=None):
    """
    Train the tumor model with and without the weak loss on noisy labels.

    Per seed the training tumor masks are perturbed once and both runs see
    the same perturbation and the same sample order.

    Returns:
        SmoothingExperiment. The summary holds the mean final validation
        Dice per weight, the number of seeds where the weak-loss run ends
        with a training loss at least as high, and whether the weak-loss
        run wins on mean final validation Dice.
    """
    if clinical_model is None:
        clinical_model, _ = fit_clinical(train_cases, cfg)
    r_hats = weak_labels(train_cases, clinical_model)
    plain_weight, weak_weight = weights
    experiment = SmoothingExperiment()

    for seed in seeds:
        tumors = noisy_tumors(train_cases, seed)
        for weight in weights:
            _, curves = train_tumor(train_cases, val_cases, cfg, r_hats, tumors,
                                    lambda_weak=weight, seed=seed)
            experiment.curves[(seed, weight)] = curves
            if out_dir is not None:
                write_curves_csv(curves, Path(out_dir) / f"curves_seed{seed}_lw{weight:g}.csv")

    frame = experiment.frame()
    by_weight = frame.groupby("lambda_weak")["final_val_dice"].mean()
    slower = sum(
        experiment.curves[(s, weak_weight)].total[-1] >= experiment.curves[(s, plain_weight)].total[-1]
        for s in seeds
    )
    experiment.summary = {
        "seeds": len(tuple(seeds)),
        "mean_final_val_dice_plain": float(by_weight[plain_weight]),
        "mean_final_val_dice_weak": float(by_weight[weak_weight]),
        "slower_loss_seeds": int(slower),
        "weak_wins_val_dice": bool(by_weight[weak_weight] > by_weight[plain_weight]),
    }
    logger.info("smoothing experiment: %s", experiment.summary)
    if out_dir is not None:
        try:
            frame.to_csv(Path(out_dir) / "smoothing_summary.csv", index=False)
        except OSError as exc:
            raise IoError(f"cannot write summary to {out_dir}: {exc}") from exc
    return experiment
