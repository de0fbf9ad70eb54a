"""
segmenter.py

Reference segmenter and its training loop.

The model is a per-voxel logistic regression over a fixed stack of
handcrafted neighbourhood features:

    p_i = sigmoid(w . z_i + b),    z_i = (f_i - mean) / scale

so the gradient of the combined loss reaches (w, b) through one chain-rule
step. mean and scale are fitted on the training voxels before the first
step and stored with the weights.

Two instances are trained in the two-step pipeline: a global one (liver vs
rest, whole volume, y coordinate as a 9th feature) and a local one (tumor vs
liver, liver crop). The local one is fitted, trained and validated on the
liver voxels of its crop only.

Optimisation follows the training settings of the reference setup: Adam
(beta1 0.9, beta2 0.999, eps 1e-8) with decoupled weight decay and a cosine
annealed learning rate, batch size 1, one shuffled pass per epoch.

A three-class softmax logistic over the same features stands in for the
single multi-class model used as an ablation baseline.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.special import expit, softmax

from .errors import DimMismatch, EmptyRegion, InvalidParams, IoError, KindMismatch, NonFiniteGradient
from .losses import FocalParams, LossWeights, combined_loss
from .volio import IDENTITY, LABEL_BACKGROUND, LABEL_TUMOR, Mask, Volume

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "intensity",
    "box_mean_r1",
    "box_mean_r2",
    "box_var_r2",
    "gauss_s1",
    "gauss_s2",
    "coord_x",
    "coord_z",
)
N_FEATURES = len(FEATURE_NAMES)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAMS_MAGIC = b"WSEG"
PARAMS_VERSION = 2


# ______________________________________________________________________________
# Features


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """
    Per-voxel feature vectors.

    Attributes:
        values (np.ndarray): (n_voxels, F) float64, voxels in C order of shape.
        shape (tuple): grid dims.
        names (tuple): feature names, length F.
        spacing, orientation: geometry of the source volume.
    """

    values: np.ndarray
    shape: tuple
    names: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: object = None

    @property
    def n_features(self):
        return self.values.shape[1]

    def grid(self, name):
        return self.values[:, self.names.index(name)].reshape(self.shape)


def _coordinate(length, axis, shape):
    ramp = np.arange(length, dtype=np.float64) / (length - 1) if length > 1 else np.zeros(1)
    view = [1, 1, 1]
    view[axis] = length
    return np.broadcast_to(ramp.reshape(view), shape)


def extract_features(volume, include_y=False):
    """
    Build the feature stack of a normalized volume.

    Neighbourhood operators replicate edge voxels at the borders. Coordinates
    are normalized to [0, 1] across the grid.
    """
    if volume.kind != "normalized":
        raise KindMismatch(f"features need a normalized volume, got {volume.kind}")
    image = volume.data.astype(np.float64)
    shape = image.shape

    mean_r1 = ndimage.uniform_filter(image, size=3, mode="nearest")
    mean_r2 = ndimage.uniform_filter(image, size=5, mode="nearest")
    square_r2 = ndimage.uniform_filter(image * image, size=5, mode="nearest")
    var_r2 = np.maximum(square_r2 - mean_r2 * mean_r2, 0.0)
    gauss_s1 = ndimage.gaussian_filter(image, sigma=1.0, mode="nearest")
    gauss_s2 = ndimage.gaussian_filter(image, sigma=2.0, mode="nearest")

    columns = [image, mean_r1, mean_r2, var_r2, gauss_s1, gauss_s2,
               _coordinate(shape[0], 0, shape), _coordinate(shape[2], 2, shape)]
    names = FEATURE_NAMES
    if include_y:
        columns.append(_coordinate(shape[1], 1, shape))
        names = names + ("coord_y",)
    values = np.stack([np.asarray(c).ravel() for c in columns], axis=1)
    return FeatureStack(values, shape, names, volume.spacing, volume.orientation)


# ______________________________________________________________________________
# Parameters and optimiser


@dataclass(frozen=True, eq=False)
class SegmenterParams:
    """
    Weights (F) and bias of the logistic segmenter.

    The weights act on standardized features (f - mean) / scale; mean and
    scale are fitted once on the training voxels and travel with the weights.
    Omitted, they default to the identity transform.
    """

    weights: np.ndarray
    bias: float = 0.0
    mean: np.ndarray = None
    scale: np.ndarray = None

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        mean, scale = _standardizer(weights.shape[0], self.mean, self.scale)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def zeros(cls, n_features=N_FEATURES, mean=None, scale=None):
        return cls(np.zeros(n_features), 0.0, mean, scale)

    @property
    def vector(self):
        return np.append(self.weights, self.bias)

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:-1].copy(), float(theta[-1]))

    def with_standardization(self, mean, scale):
        return SegmenterParams(self.weights, self.bias, mean, scale)

    def with_vector(self, theta):
        """New weights and bias, same standardization."""
        theta = np.asarray(theta, dtype=np.float64)
        return SegmenterParams(theta[:-1].copy(), float(theta[-1]), self.mean, self.scale)

    def standardize(self, values):
        return (values - self.mean) / self.scale


@dataclass(frozen=True, eq=False)
class MulticlassParams:
    """Weights (F, K) and biases (K) of the softmax segmenter, on standardized features."""

    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray = None
    scale: np.ndarray = None

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        mean, scale = _standardizer(weights.shape[0], self.mean, self.scale)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def zeros(cls, n_features, n_classes=3, mean=None, scale=None):
        return cls(np.zeros((n_features, n_classes)), np.zeros(n_classes), mean, scale)

    @property
    def vector(self):
        return np.concatenate([self.weights.ravel(), self.bias])

    def with_vector(self, theta):
        k = self.bias.size
        return MulticlassParams(theta[:-k].reshape(self.weights.shape).copy(), theta[-k:].copy(),
                                self.mean, self.scale)

    def standardize(self, values):
        return (values - self.mean) / self.scale


def _standardizer(n_features, mean, scale):
    mean = np.zeros(n_features) if mean is None else np.asarray(mean, dtype=np.float64)
    scale = np.ones(n_features) if scale is None else np.asarray(scale, dtype=np.float64)
    if mean.shape != (n_features,) or scale.shape != (n_features,):
        raise InvalidParams(f"standardization needs {n_features} means and scales")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(scale)) and np.all(scale > 0)):
        raise InvalidParams("feature scales must be finite and positive")
    return mean, scale


def fit_standardization(stacks, regions=None):
    """
    Per-feature mean and standard deviation over the training voxels.

    Args:
        stacks (list): FeatureStacks.
        regions (list): boolean grids restricting each stack's voxels, or
            None entries for the whole grid.

    Returns:
        tuple: (mean, scale); features with no spread get scale 1.
    """
    regions = list(regions) if regions is not None else [None] * len(stacks)
    n_features = stacks[0].n_features
    count, total, squares = 0, np.zeros(n_features), np.zeros(n_features)
    for stack, region in zip(stacks, regions):
        rows = stack.values if region is None else stack.values[np.asarray(region, dtype=bool).ravel()]
        count += rows.shape[0]
        total += rows.sum(axis=0)
        squares += (rows * rows).sum(axis=0)
    if count == 0:
        return np.zeros(n_features), np.ones(n_features)
    mean = total / count
    std = np.sqrt(np.maximum(squares / count - mean * mean, 0.0))
    spread = std > 1e-8 * np.maximum(1.0, np.abs(mean))
    return mean, np.where(spread, std, 1.0)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Adam moments, step counter and schedule settings."""

    step: int
    m: np.ndarray
    v: np.ndarray
    base_lr: float = 1e-4
    weight_decay: float = 1e-5
    total_steps: int = 1

    @classmethod
    def initial(cls, n_params, base_lr=1e-4, weight_decay=1e-5, total_steps=1):
        return cls(0, np.zeros(n_params), np.zeros(n_params), float(base_lr),
                   float(weight_decay), max(int(total_steps), 1))


def cosine_lr(base_lr, step, total_steps):
    """base * (1 + cos(pi t / T)) / 2, held at 0 after T."""
    t = min(step, total_steps)
    return base_lr * (1.0 + np.cos(np.pi * t / total_steps)) / 2.0


def adam_update(theta, grad, opt):
    """
    One Adam step with decoupled weight decay on a flat parameter vector.

    Returns:
        tuple: (new theta, new OptimizerState)
    """
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient at step {opt.step}: {grad}")
    lr = cosine_lr(opt.base_lr, opt.step, opt.total_steps)
    t = opt.step + 1
    m = ADAM_BETA1 * opt.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * opt.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * opt.weight_decay * theta
    return theta, replace(opt, step=t, m=m, v=v)


# ______________________________________________________________________________
# Forward pass and gradients


def _check_dims(params, features):
    if params.weights.shape[0] != features.n_features:
        raise DimMismatch(
            f"parameters expect {params.weights.shape[0]} features, stack has {features.n_features}")


def probabilities(params, features):
    """float64 probabilities shaped like the feature grid."""
    _check_dims(params, features)
    logits = params.standardize(features.values) @ params.weights + params.bias
    return expit(logits).reshape(features.shape)


def forward(params, features):
    """p = sigmoid(w . z + b), z the standardized features, as a probability Volume."""
    return Volume(probabilities(params, features), features.spacing,
                  features.orientation or IDENTITY, "probability")


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """
    One training case.

    Attributes:
        features (FeatureStack): model inputs.
        target (np.ndarray): boolean ground truth on the feature grid.
        region (np.ndarray): boolean liver region, or None for the whole
            grid. When set, every loss term sees only the region voxels.
        r_hat (float): clinical ratio for the weak loss, or None.
        name (str): identifier for logs.
    """

    features: FeatureStack
    target: np.ndarray
    region: np.ndarray = None
    r_hat: float = None
    name: str = ""


def loss_and_gradient(params, sample, w=LossWeights(), fp=FocalParams()):
    """
    Combined loss of one sample and its gradient w.r.t. (weights, bias).

    Voxels outside the sample region contribute neither loss nor gradient.

    Returns:
        tuple: (LossBundle, gradient vector of length F + 1)

    Raises:
        EmptyRegion: the sample region has no voxel.
    """
    _check_dims(params, sample.features)
    values = sample.features.values
    target = np.asarray(sample.target, dtype=bool).ravel()
    region = None
    if sample.region is not None:
        rows = np.flatnonzero(np.asarray(sample.region, dtype=bool).ravel())
        if rows.size == 0:
            raise EmptyRegion(f"sample {sample.name!r} has an empty region")
        values, target = values[rows], target[rows]
        region = np.ones(rows.size, dtype=bool)
    z = params.standardize(values)
    p = expit(z @ params.weights + params.bias)
    bundle = combined_loss(p, target, region, sample.r_hat, w, fp)
    dz = bundle.grad * p * (1.0 - p)
    grad = np.append(dz @ z, dz.sum())
    return bundle, grad


def train_step(params, opt, sample, w=LossWeights(), fp=FocalParams()):
    """
    Backpropagate the combined loss through the sigmoid and apply Adam.

    Returns:
        tuple: (new params, new OptimizerState, LossBundle before the update)

    Raises:
        NonFiniteGradient: the gradient contains NaN or Inf.
    """
    bundle, grad = loss_and_gradient(params, sample, w, fp)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient on sample {sample.name!r} at step {opt.step}")
    theta, opt = adam_update(params.vector, grad, opt)
    return params.with_vector(theta), opt, bundle


# ______________________________________________________________________________
# Training loop


@dataclass(frozen=True)
class TrainingConfig:
    """Settings of one training run."""

    epochs: int = 150
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    threshold: float = 0.5


@dataclass
class TrainingCurves:
    """Per-epoch mean training losses and validation Dice."""

    total: list = field(default_factory=list)
    dice: list = field(default_factory=list)
    focal: list = field(default_factory=list)
    weak: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)

    def __len__(self):
        return len(self.total)

    def to_frame(self):
        return pd.DataFrame({
            "epoch": np.arange(1, len(self) + 1),
            "total": self.total,
            "dice": self.dice,
            "focal": self.focal,
            "weak": self.weak,
            "val_dice": self.val_dice,
        })


def hard_dice(prediction, target):
    """Dice of two boolean grids; 1.0 when both are empty."""
    prediction = np.asarray(prediction, dtype=bool)
    target = np.asarray(target, dtype=bool)
    overlap = np.count_nonzero(prediction & target)
    size = np.count_nonzero(prediction) + np.count_nonzero(target)
    return 1.0 if size == 0 else 2.0 * overlap / size


def validation_dice(params, samples, threshold=0.5):
    """Mean Dice of thresholded predictions inside each sample region (no postprocessing)."""
    scores = []
    for sample in samples:
        prediction = probabilities(params, sample.features) >= threshold
        if sample.region is not None:
            prediction &= np.asarray(sample.region, dtype=bool)
        scores.append(hard_dice(prediction, sample.target))
    return float(np.mean(scores)) if scores else float("nan")


def train(dataset, val, cfg=TrainingConfig()):
    """
    Train a logistic segmenter from zero initialisation.

    Feature standardization is fitted first on the training voxels (the
    sample regions when set) and frozen for the run.

    Args:
        dataset (list): TrainingSamples, visited once per epoch in a
            seed-shuffled order (batch size 1).
        val (list): validation samples; the training set is used when empty.
        cfg (TrainingConfig): optimisation settings.

    Returns:
        tuple: (SegmenterParams with the best validation Dice, TrainingCurves)
    """
    if not dataset:
        raise ValueError("training needs at least one sample")
    val = list(val) or list(dataset)
    mean, scale = fit_standardization([s.features for s in dataset], [s.region for s in dataset])
    params = SegmenterParams.zeros(dataset[0].features.n_features, mean, scale)
    opt = OptimizerState.initial(params.vector.size, cfg.learning_rate, cfg.weight_decay,
                                 cfg.epochs * len(dataset))
    rng = np.random.default_rng(cfg.seed)
    curves = TrainingCurves()
    best_params, best_dice = params, -np.inf

    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        for index in rng.permutation(len(dataset)):
            params, opt, bundle = train_step(params, opt, dataset[index], cfg.weights, cfg.focal)
            sums += (bundle.total, bundle.dice, bundle.focal, bundle.weak)
        sums /= len(dataset)
        score = validation_dice(params, val, cfg.threshold)
        curves.total.append(float(sums[0]))
        curves.dice.append(float(sums[1]))
        curves.focal.append(float(sums[2]))
        curves.weak.append(float(sums[3]))
        curves.val_dice.append(score)
        if score > best_dice:
            best_params, best_dice = params, score
        logger.debug("epoch %d: loss %.5f val dice %.4f", epoch + 1, sums[0], score)

    logger.info("trained %d epochs on %d samples, best val dice %.4f",
                cfg.epochs, len(dataset), best_dice)
    return best_params, curves


def predict(params, volume, threshold=0.5, label=LABEL_TUMOR, features=None, include_y=False):
    """
    Binarize the segmenter output: `label` where p >= threshold.

    Args:
        params (SegmenterParams): trained parameters.
        volume (Volume): normalized input.
        threshold (float): inclusive probability threshold.
        label (int): label written on foreground voxels.
        features (FeatureStack): precomputed features of `volume` (optional).
        include_y (bool): build the 9-feature global stack.
    """
    features = features if features is not None else extract_features(volume, include_y)
    foreground = probabilities(params, features) >= threshold
    labels = np.where(foreground, label, LABEL_BACKGROUND).astype(np.uint8)
    return Mask(labels, volume.spacing, volume.orientation)


# ______________________________________________________________________________
# Three-class softmax proxy


def multiclass_loss_and_gradient(params, features, labels):
    """Mean softmax cross-entropy and its gradient vector."""
    z = params.standardize(features.values)
    probs = softmax(z @ params.weights + params.bias, axis=1)
    labels = np.asarray(labels).ravel().astype(np.intp)
    n = labels.size
    picked = probs[np.arange(n), labels]
    value = -np.mean(np.log(picked + 1e-12))
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    grad_w = z.T @ d_logits
    return float(value), np.concatenate([grad_w.ravel(), d_logits.sum(axis=0)])


def train_multiclass(dataset, cfg=TrainingConfig(), n_classes=3):
    """
    Train the softmax proxy on (FeatureStack, label grid) pairs.

    Returns:
        tuple: (MulticlassParams after the last epoch, list of mean epoch losses)
    """
    if not dataset:
        raise ValueError("training needs at least one sample")
    mean, scale = fit_standardization([features for features, _ in dataset])
    params = MulticlassParams.zeros(dataset[0][0].n_features, n_classes, mean, scale)
    opt = OptimizerState.initial(params.vector.size, cfg.learning_rate, cfg.weight_decay,
                                 cfg.epochs * len(dataset))
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for index in rng.permutation(len(dataset)):
            features, labels = dataset[index]
            value, grad = multiclass_loss_and_gradient(params, features, labels)
            theta, opt = adam_update(params.vector, grad, opt)
            params = params.with_vector(theta)
            total += value
        history.append(total / len(dataset))
    logger.info("trained softmax proxy, final loss %.5f", history[-1])
    return params, history


def predict_multiclass(params, features):
    """Arg-max class per voxel, shaped like the feature grid."""
    logits = params.standardize(features.values) @ params.weights + params.bias
    return np.argmax(logits, axis=1).reshape(features.shape).astype(np.uint8)


# ______________________________________________________________________________
# Serialisation


def encode_params(params):
    """
    magic, version, F, then as little-endian float64: F weights, the bias,
    F feature means and F feature scales.
    """
    header = struct.pack("<4sHH", PARAMS_MAGIC, PARAMS_VERSION, params.weights.size)
    body = np.concatenate([params.vector, params.mean, params.scale])
    return header + np.asarray(body, dtype="<f8").tobytes()


def decode_params(blob):
    if len(blob) < 8:
        raise InvalidParams("parameter blob is shorter than its header")
    magic, version, n_features = struct.unpack("<4sHH", blob[:8])
    if magic != PARAMS_MAGIC or version != PARAMS_VERSION:
        raise InvalidParams(f"unknown parameter blob {magic!r} v{version}")
    if len(blob) != 8 + 8 * (3 * n_features + 1):
        raise InvalidParams("parameter blob length does not match its feature count")
    body = np.frombuffer(blob, dtype="<f8", offset=8).astype(np.float64)
    theta, mean, scale = np.split(body, [n_features + 1, 2 * n_features + 1])
    return SegmenterParams.from_vector(theta).with_standardization(mean, scale)


def save_params(params, path):
    try:
        Path(path).write_bytes(encode_params(params))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_params(path):
    try:
        return decode_params(Path(path).read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def write_curves_csv(curves, path):
    """epoch, total, dice, focal, weak, val_dice."""
    try:
        curves.to_frame().to_csv(path, index=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
