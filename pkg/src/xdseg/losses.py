"""Compound Dice + binary cross-entropy loss over post-activation outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError


@dataclass
class LossConfig:
    epsilon: float = 1e-6  # Dice denominator guard
    log_floor: float = 1e-7  # clamp for the cross-entropy logarithms

    def __post_init__(self):
        if self.epsilon <= 0 or self.log_floor <= 0:
            raise ConfigError("epsilon and log_floor must be positive")


def compound_loss(pred: np.ndarray, target: np.ndarray,
                  cfg: LossConfig | None = None):
    """Dice term plus mean binary cross-entropy; returns ``(loss, grad)``.

    ``pred`` holds post-activation probabilities over a (batch, class,
    *spatial) layout; ``target`` is binary with the same shape. The Dice
    term is 1 - (2/N) * sum_n overlap_n / (|y_n| + |g_n| + eps) with the
    per-class sums taken over batch and spatial coordinates. Cross-entropy
    places predictions inside the (floor-clamped) logarithms with targets as
    coefficients, averaged over every coordinate of every class, so the
    total is non-negative and minimized at ``pred == target``.
    """
    cfg = cfg or LossConfig()
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target {target.shape}")
    if pred.ndim < 2:
        raise DimensionError("expected (batch, class, ...) layout")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ValidationError("predictions must lie in [0, 1] (post-activation)")

    n_classes = pred.shape[1]
    reduce_axes = (0,) + tuple(range(2, pred.ndim))
    overlap = (pred * target).sum(axis=reduce_axes)
    denom = pred.sum(axis=reduce_axes) + target.sum(axis=reduce_axes) + cfg.epsilon
    dice_term = 1.0 - (2.0 / n_classes) * float((overlap / denom).sum())

    yc = np.clip(pred, cfg.log_floor, 1.0 - cfg.log_floor)
    count = pred.size
    bce = -float(
        (target * np.log(yc) + (1.0 - target) * np.log(1.0 - yc)).sum()
    ) / count
    loss = dice_term + bce

    # gradient of the Dice term: d/dy_i [S_n/D_n] = (g_i * D_n - S_n) / D_n^2
    shape = (1, n_classes) + (1,) * (pred.ndim - 2)
    s = overlap.reshape(shape)
    d = denom.reshape(shape)
    grad_dice = -(2.0 / n_classes) * (target * d - s) / (d * d)
    inside = (pred > cfg.log_floor) & (pred < 1.0 - cfg.log_floor)
    grad_bce = np.where(inside, -(target / yc - (1.0 - target) / (1.0 - yc)) / count,
                        0.0)
    return loss, (grad_dice + grad_bce).astype(pred.dtype)


def dice_score_term(pred: np.ndarray, target: np.ndarray,
                    epsilon: float = 1e-6) -> float:
    """Soft Dice averaged over classes; the training score the schedules track."""
    reduce_axes = (0,) + tuple(range(2, pred.ndim))
    overlap = (pred * target).sum(axis=reduce_axes)
    denom = pred.sum(axis=reduce_axes) + target.sum(axis=reduce_axes) + epsilon
    return float((2.0 * overlap / denom).mean())
