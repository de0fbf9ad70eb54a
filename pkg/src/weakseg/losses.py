"""
losses.py

Training objective for the tumor model:

    L = lambda_f * focal + lambda_d * dice + lambda_w * weak

Each loss returns its value and the analytic gradient with respect to every
voxel probability p_i. Computations run in float64 on flat copies so the
finite-difference checks in the tests are meaningful.

The weak loss compares a soft tumor-to-liver ratio, the mean tumor
probability over the liver region, with the clinically predicted ratio. On a
binary p that agrees with the tumor mask it equals the mask ratio exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyRegion, InvalidWeights, OutOfRange, ShapeMismatch
from .volio import Mask, Volume

DICE_EPS = 1e-6
LOG_GUARD = 1e-12
RANGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Balancing terms of the combined loss (focal, dice, weak)."""

    lambda_f: float = 1.0
    lambda_d: float = 1.0
    lambda_w: float = 0.5

    def __post_init__(self):
        values = (self.lambda_f, self.lambda_d, self.lambda_w)
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise InvalidWeights(f"loss weights must be non-negative, got {values}")
        if not any(v > 0 for v in values):
            raise InvalidWeights("at least one loss weight must be positive")


@dataclass(frozen=True)
class FocalParams:
    """Focusing parameter gamma >= 0 (0 gives plain cross-entropy)."""

    gamma: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise OutOfRange(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True, eq=False)
class LossBundle:
    """Weighted total, per-term values and d(total)/d(p) per voxel."""

    total: float
    dice: float
    focal: float
    weak: float
    grad: np.ndarray

    def terms(self):
        return {"total": self.total, "dice": self.dice, "focal": self.focal, "weak": self.weak}


def _probabilities(p):
    values = p.data if isinstance(p, Volume) else p
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < -RANGE_TOLERANCE or values.max() > 1.0 + RANGE_TOLERANCE):
        raise OutOfRange("probabilities must lie in [0, 1]")
    # values within the tolerance band are snapped into [0, 1]
    return np.clip(values, 0.0, 1.0)


def _binary(g, shape):
    values = g.foreground() if isinstance(g, Mask) else np.asarray(g) != 0
    if values.shape != shape:
        raise ShapeMismatch(f"target shape {values.shape} does not match probabilities {shape}")
    return values.astype(np.float64)


def dice_loss(p, g):
    """
    Squared-denominator soft Dice loss.

    value = 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)

    Returns:
        tuple: (value, grad) with grad shaped like p.
    """
    p = _probabilities(p)
    g = _binary(g, p.shape)
    numerator = 2.0 * np.sum(p * g) + DICE_EPS
    denominator = np.sum(p * p) + np.sum(g * g) + DICE_EPS
    value = 1.0 - numerator / denominator
    grad = -(2.0 * g * denominator - numerator * 2.0 * p) / denominator ** 2
    return float(value), grad


def focal_loss(p, g, fp=FocalParams()):
    """
    Mean binary focal loss.

    With p_t = p where g = 1 and 1 - p elsewhere:
        value = -(1/N) sum (1 - p_t)^gamma log(p_t + delta)

    Returns:
        tuple: (value, grad) with grad shaped like p.
    """
    p = _probabilities(p)
    g = _binary(g, p.shape)
    gamma = float(fp.gamma)
    n = p.size
    p_t = np.where(g > 0, p, 1.0 - p)
    q = 1.0 - p_t
    log_pt = np.log(p_t + LOG_GUARD)
    weight = q ** gamma
    value = -np.sum(weight * log_pt) / n

    # d/dp_t of -(1 - p_t)^gamma log(p_t + delta)
    d_pt = -weight / (p_t + LOG_GUARD)
    if gamma > 0:
        q_safe = np.where(q > 0, q, 1.0)
        d_pt = d_pt + np.where(q > 0, gamma * q_safe ** (gamma - 1.0) * log_pt, 0.0)
    sign = np.where(g > 0, 1.0, -1.0)
    return float(value), sign * d_pt / n


def weak_loss(p, region, r_hat):
    """
    Squared deviation of the soft tumor ratio from the clinical ratio.

    R = sum_{i in region} p_i / |region|; value = (R - r_hat)^2.

    Returns:
        tuple: (value, grad); grad is 2 (R - r_hat) / |region| inside the
        region and 0 outside.

    Raises:
        EmptyRegion: the region has no voxel.
    """
    p = _probabilities(p)
    inside = _binary(region, p.shape) > 0
    ratio = soft_tlvr(p, inside)
    r_hat = float(r_hat)
    if not 0.0 <= r_hat <= 1.0:
        raise OutOfRange(f"r_hat must lie in [0, 1], got {r_hat}")
    count = int(np.count_nonzero(inside))
    deviation = ratio - r_hat
    grad = np.where(inside, 2.0 * deviation / count, 0.0)
    return float(deviation * deviation), grad


def soft_tlvr(p, region):
    """Mean probability over the region (the differentiable ratio)."""
    p = _probabilities(p)
    inside = _binary(region, p.shape) > 0
    if not inside.any():
        raise EmptyRegion("soft ratio needs a non-empty region")
    return float(np.sum(p[inside]) / np.count_nonzero(inside))


def combined_loss(p, g, region=None, r_hat=None, w=LossWeights(), fp=FocalParams()):
    """
    Weighted sum of focal, Dice and weak losses with per-term breakdown.

    The weak term is evaluated whenever a region and r_hat are given; it is
    required only when lambda_w > 0.
    """
    p = _probabilities(p)
    focal, focal_grad = focal_loss(p, g, fp)
    dice, dice_grad = dice_loss(p, g)
    total = w.lambda_f * focal + w.lambda_d * dice
    grad = w.lambda_f * focal_grad + w.lambda_d * dice_grad

    weak = 0.0
    if region is not None and r_hat is not None:
        weak, weak_grad = weak_loss(p, region, r_hat)
        total += w.lambda_w * weak
        grad = grad + w.lambda_w * weak_grad
    elif w.lambda_w > 0:
        raise EmptyRegion("lambda_w > 0 needs a liver region and r_hat")
    return LossBundle(float(total), dice, focal, weak, grad)
