"""Dice overlap loss for binary segmentation targets."""

from __future__ import annotations

import numpy as np

DICE_EPS = 1e-7


def dice_loss(target, pred, eps: float = DICE_EPS):
    """Negative Dice overlap between a binary target and a prediction.

    loss = -2 * sum(target * pred) / (sum(target) + sum(pred) + eps)

    Returns ``(loss, grad)`` where grad is d(loss)/d(pred), same shape as
    pred.  The loss lies in [-1, 0]: -1 for a perfect match, 0 when the
    overlap is empty.  Sums accumulate in float64.
    """
    t = np.asarray(target)
    p = np.asarray(pred)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: target {t.shape} vs pred {p.shape}")
    overlap = float((t * p).sum(dtype=np.float64))
    denom = float(t.sum(dtype=np.float64) + p.sum(dtype=np.float64) + eps)
    loss = -2.0 * overlap / denom
    # d/dp_k = -2*t_k/denom + 2*overlap/denom^2   (d denom/d p_k = 1)
    grad = (-2.0 * t.astype(p.dtype) + (2.0 * overlap / denom)) / denom
    return loss, grad.astype(p.dtype, copy=False)
