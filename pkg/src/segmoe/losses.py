"""Training objective and evaluation metrics.

The prediction loss is Huber (quadratic inside |e| <= delta, linear outside);
the auxiliary balance term N * sum_i f_i * r_i discourages routing collapse.
Usage fractions f enter as constants, gradients flow through the mean router
probabilities r only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .moe import RouteDecision
from .tensor import Tensor


def huber(pred: Tensor, target: Tensor | np.ndarray, delta: float) -> Tensor:
    """Mean elementwise Huber loss; continuous first derivative at |e| = delta."""
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"huber shape mismatch: {pred.shape} vs {target.shape}")
    err = pred - target
    abs_err = err.abs()
    quad_region = np.abs(err.data) <= delta
    quad = 0.5 * err * err
    lin = delta * (abs_err - 0.5 * delta)
    mask = Tensor(quad_region.astype(np.float64))
    return (mask * quad + (1.0 - mask) * lin).mean()


def aux_balance_loss(f: np.ndarray, r: Tensor | np.ndarray, n_experts: int) -> Tensor:
    """N * sum_i f_i r_i; equals 1 for uniform routing and N at full collapse."""
    f = np.asarray(f, dtype=np.float64)
    r_data = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64)
    if f.shape != (n_experts,) or r_data.shape != (n_experts,):
        raise ValueError(f"expected {n_experts} entries, got f{f.shape}, r{r_data.shape}")
    if (f < 0).any() or (r_data < 0).any():
        raise ValueError("balance loss inputs must be non-negative")
    for name, vec in (("f", f), ("r", r_data)):
        if abs(vec.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} must sum to 1 within 1e-6, got {vec.sum()!r}")
    r_t = r if isinstance(r, Tensor) else Tensor(r_data)
    return (Tensor(f) * r_t).sum() * float(n_experts)


@dataclass
class LossReport:
    """Scalar components of one objective evaluation; `total` keeps the graph."""

    pred_loss: float
    aux_per_layer: list[float]
    aux_mean: float
    total_value: float
    alpha: float
    delta: float
    total: Tensor


def total_loss(
    pred: Tensor,
    target: Tensor | np.ndarray,
    decisions: list[RouteDecision],
    alpha: float,
    delta: float,
    expected_layers: int | None = None,
) -> LossReport:
    """Huber prediction loss plus alpha times the layer-mean balance loss."""
    if expected_layers is not None and len(decisions) != expected_layers:
        raise ValueError(f"expected routing stats for {expected_layers} layers, got {len(decisions)}")
    if not decisions:
        raise ValueError("missing routing statistics: no layer decisions supplied")
    pred_term = huber(pred, target, delta)

    aux_terms = []
    for d in decisions:
        f = d.counts / (d.top_k * d.n_segments)
        r = d.scores.mean(axis=0)
        aux_terms.append(aux_balance_loss(f, r, d.n_experts))
    aux_sum = aux_terms[0]
    for t in aux_terms[1:]:
        aux_sum = aux_sum + t
    aux_mean = aux_sum * (1.0 / len(aux_terms))

    total = pred_term + alpha * aux_mean if alpha != 0.0 else pred_term
    return LossReport(
        pred_loss=float(pred_term.data),
        aux_per_layer=[float(t.data) for t in aux_terms],
        aux_mean=float(aux_mean.data),
        total_value=float(total.data),
        alpha=alpha,
        delta=delta,
        total=total,
    )


def mse_mae(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Per-series mean squared / absolute error over the horizon."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse_mae length mismatch: {pred.shape} vs {target.shape}")
    err = pred - target
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))
