"""KL-divergence loss with L2 regularization."""

from __future__ import annotations

import numpy as np

from ..errors import LossError

PRED_FLOOR = 1e-8


def _check_simplex(rows: np.ndarray, what: str, atol: float = 1e-4) -> None:
    if np.any(rows < -1e-9):
        raise LossError(f"{what} has negative entries")
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise LossError(f"{what} rows do not sum to 1")


def kl_loss(y_true: np.ndarray, y_pred: np.ndarray,
            params=(), l2_lambda: float = 0.0):
    """Batch-summed KL(y_true || y_pred) plus (lambda/2) * sum ||theta||^2.

    Uses natural log and the 0*ln(0/.) = 0 convention; predictions are
    clamped at 1e-8. Returns (loss, dloss/dy_pred); the L2 gradient is added
    to parameter grads separately via apply_l2.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise LossError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    _check_simplex(y_true, "y_true")
    _check_simplex(y_pred, "y_pred")
    clamped = np.maximum(y_pred, PRED_FLOOR)
    mask = y_true > 0
    terms = np.zeros_like(y_true, dtype=np.float64)
    terms[mask] = y_true[mask] * np.log(y_true[mask] / clamped[mask])
    loss = float(terms.sum())
    for p in params:
        loss += 0.5 * l2_lambda * float(np.sum(
            p.value.astype(np.float64) ** 2))
    dpred = np.where(y_pred > PRED_FLOOR, -y_true / clamped, 0.0).astype(
        y_pred.dtype)
    return loss, dpred


def apply_l2(params, l2_lambda: float) -> None:
    """Add the L2 term's gradient (lambda * theta) to each parameter grad."""
    if l2_lambda == 0.0:
        return
    for p in params:
        p.grad += (l2_lambda * p.value).astype(p.grad.dtype)
