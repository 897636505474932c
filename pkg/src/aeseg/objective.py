"""Masked BCE + soft Dice objective over valid pixels.

All sums are pooled over every valid pixel in the batch and accumulated in
float64 regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    epsilon: float = 1e-6
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if not 0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must be in (0, 1e-3]")
        if not 0 < self.prob_clamp <= 1e-4:
            raise ValueError("prob_clamp must be in (0, 1e-4]")


def sigmoid(z):
    """Logistic function, split by sign so neither branch overflows."""
    z = np.asarray(z)
    out = np.empty(z.shape, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _prepare(p, y, m):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    if not (p.shape == y.shape == m.shape):
        raise ValueError(f"shape mismatch: p{p.shape} y{y.shape} m{m.shape}")
    if not m.any():
        raise EmptyMaskError("empty valid mask")
    # select, not multiply: values at invalid pixels must not reach the sums
    return p[m], y[m]


def masked_bce(p, y, m, config: ObjectiveConfig = ObjectiveConfig()) -> float:
    pv, yv = _prepare(p, y, m)
    pc = np.clip(pv, config.prob_clamp, 1.0 - config.prob_clamp)
    terms = yv * np.log(pc) + (1.0 - yv) * np.log1p(-pc)
    return float(-terms.sum() / pv.size)


def soft_dice(p, y, m, config: ObjectiveConfig = ObjectiveConfig()) -> float:
    pv, yv = _prepare(p, y, m)
    eps = config.epsilon
    return float(1.0 - (2.0 * (pv * yv).sum() + eps) / (pv.sum() + yv.sum() + eps))


def total_loss(p, y, m, config: ObjectiveConfig = ObjectiveConfig()):
    """Return ``(bce + dice, {"bce": ..., "dice": ...})``."""
    bce = masked_bce(p, y, m, config)
    dice = soft_dice(p, y, m, config)
    return bce + dice, {"bce": bce, "dice": dice}


def loss_and_logit_grad(z, y, m, config: ObjectiveConfig = ObjectiveConfig()):
    """Total objective evaluated from logits, with its gradient w.r.t. the logits.

    Returns ``(loss, components, dz)``; ``dz`` is float64 and zero at invalid
    pixels. The clamp contributes zero slope where it is active.
    """
    z = np.asarray(z, dtype=np.float64)
    m = np.asarray(m, dtype=bool)
    p = sigmoid(z)
    loss, parts = total_loss(p, y, m, config)

    y = np.asarray(y, dtype=np.float64)
    n = m.sum()
    lo, hi = config.prob_clamp, 1.0 - config.prob_clamp
    inside = (p > lo) & (p < hi)
    pc = np.clip(p, lo, hi)
    dbce_dp = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)) / n, 0.0)

    pv, yv = p[m], y[m]
    eps = config.epsilon
    num = 2.0 * (pv * yv).sum() + eps
    den = pv.sum() + yv.sum() + eps
    ddice_dp = -(2.0 * y * den - num) / den**2

    dz = np.where(m, (dbce_dp + ddice_dp) * p * (1.0 - p), 0.0)
    return loss, parts, dz
