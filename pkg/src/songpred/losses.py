"""Per-task MSE and the three loss-combination strategies.

The uncertainty strategy learns a per-task log-variance eta = log(sigma^2),
so the combined loss 0.5*exp(-eta)*L + 0.5*eta is algebraically the usual
homoscedastic form sum 1/(2 sigma^2) * L + log sigma while keeping the
variance positive by construction. Its stationary point is sigma^2 = L.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_MANUAL_WEIGHTS = (5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0)
STRATEGY_KINDS = ("equal", "weighted", "uncertainty")


@dataclass(frozen=True)
class LossStrategy:
    kind: str = "equal"
    manual_weights: tuple[float, ...] = DEFAULT_MANUAL_WEIGHTS

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown loss strategy {self.kind!r}")
        if any(w <= 0 for w in self.manual_weights):
            raise ValueError("manual weights must be positive")

    def weights_for(self, n_tasks: int) -> np.ndarray:
        if len(self.manual_weights) < n_tasks:
            raise ValueError(f"need {n_tasks} manual weights, have {len(self.manual_weights)}")
        return np.asarray(self.manual_weights[:n_tasks], dtype=np.float64)


@dataclass(frozen=True)
class CombinedLoss:
    total: float
    task_scale: np.ndarray                 # multiplies per-task prediction gradients
    dtotal_deta: Optional[np.ndarray]      # present only for the uncertainty strategy


def task_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over the batch and its gradient w.r.t. predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1 or pred.shape[0] < 1:
        raise ValueError(f"pred/target shapes {pred.shape}/{target.shape} invalid")
    diff = pred - target
    b = pred.shape[0]
    return float(diff @ diff) / b, 2.0 * diff / b


def combine_losses(losses: np.ndarray, strategy: LossStrategy,
                   eta: Optional[np.ndarray] = None) -> CombinedLoss:
    """Combine per-task MSE values into one scalar plus gradient scales.

    equal:        total = sum L_i,               scale_i = 1
    weighted:     total = sum w_i L_i,           scale_i = w_i
    uncertainty:  total = sum 0.5 exp(-eta_i) L_i + 0.5 eta_i,
                  scale_i = 0.5 exp(-eta_i),
                  d total / d eta_i = -0.5 exp(-eta_i) L_i + 0.5
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.shape[0]
    if strategy.kind == "uncertainty":
        if eta is None or np.asarray(eta).shape != (n,):
            raise ValueError("uncertainty strategy requires one eta per task")
        eta = np.asarray(eta, dtype=np.float64)
        scale = 0.5 * np.exp(-eta)
        total = float(np.sum(scale * losses + 0.5 * eta))
        return CombinedLoss(total=total, task_scale=scale,
                            dtotal_deta=-scale * losses + 0.5)
    if eta is not None:
        raise ValueError(f"{strategy.kind} strategy takes no uncertainty parameters")
    if strategy.kind == "equal":
        return CombinedLoss(total=float(losses.sum()), task_scale=np.ones(n),
                            dtotal_deta=None)
    weights = strategy.weights_for(n)
    # np.sum of the product keeps weighted(1,...,1) bit-identical to equal
    return CombinedLoss(total=float(np.sum(weights * losses)), task_scale=weights,
                        dtotal_deta=None)
