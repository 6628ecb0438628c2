"""Bipartite matching between predictions and ground truth, plus the
matching-instability metric.

The matching part's predictions are assigned one-to-one to ground-truth
instances by minimizing a composite cost (focal-style classification cost +
mean L1 distance between center-point sets). The instability count IS is the
number of predictions whose matched ground-truth index changed between two
training snapshots; its per-image maximum is twice the instance count, since
only entries that are matched in at least one of the two snapshots can
differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import sample_uniform

__all__ = [
    "MatchCost",
    "MatchAssignment",
    "hungarian_match",
    "build_cost_matrix",
    "instability",
]

UNMATCHED = -1


@dataclass(frozen=True)
class MatchCost:
    """Weights of the composite matching cost."""

    weight_cls: float = 1.0
    weight_coord: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.weight_cls < 0 or self.weight_coord < 0:
            raise ValueError("cost weights must be non-negative")
        if self.weight_cls == 0 and self.weight_coord == 0:
            raise ValueError("at least one cost weight must be positive")


@dataclass(frozen=True)
class MatchAssignment:
    """W[n] = m if prediction n is matched to ground truth m, -1 otherwise."""

    W: np.ndarray  # (N_pred,) int64

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.int64)
        matched = W[W != UNMATCHED]
        if len(np.unique(matched)) != len(matched):
            raise ValueError("matched ground-truth indices must be distinct")
        object.__setattr__(self, "W", W)

    @property
    def num_matched(self) -> int:
        return int(np.sum(self.W != UNMATCHED))


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimize total cost over one-to-one assignments covering all columns.

    cost is (N_pred, M_gt) with N_pred >= M_gt; every ground truth gets
    matched, surplus predictions stay at -1.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    n_pred, m_gt = cost.shape
    if n_pred < m_gt:
        raise ValueError(f"need at least as many predictions as ground truths ({n_pred} < {m_gt})")
    W = np.full(n_pred, UNMATCHED, dtype=np.int64)
    if m_gt > 0:
        rows, cols = linear_sum_assignment(cost)
        W[rows] = cols
    return MatchAssignment(W=W)


def _focal_cost(scores: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Classification term of the matching cost (lower for confident scores)."""
    scores = np.clip(scores, 1e-8, 1.0 - 1e-8)
    pos = alpha * (1.0 - scores) ** gamma * (-np.log(scores))
    neg = (1.0 - alpha) * scores**gamma * (-np.log(1.0 - scores))
    return pos - neg


def build_cost_matrix(
    pred_scores: np.ndarray,
    pred_points: np.ndarray,
    gt_instances,
    cfg: MatchCost = MatchCost(),
) -> np.ndarray:
    """Composite cost, shape (N_pred, M_gt).

    cost[n, m] = weight_cls * focal_cost(score_n)
               + weight_coord * mean over T points of |dx| + |dy|
    against the ground-truth center curve sampled at the same T.
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_points = np.asarray(pred_points, dtype=np.float64)
    if pred_points.ndim != 3 or pred_points.shape[2] != 2:
        raise ValueError(f"pred_points must be (N, T, 2), got {pred_points.shape}")
    if pred_scores.shape[0] != pred_points.shape[0]:
        raise ValueError("pred_scores and pred_points disagree on N_pred")
    T = pred_points.shape[1]
    gt_points = np.stack([sample_uniform(inst.center, T) for inst in gt_instances])  # (M, T, 2)
    # (N, M): mean L1 point distance
    diff = np.abs(pred_points[:, None] - gt_points[None, :]).sum(-1).mean(-1)
    cls = _focal_cost(pred_scores, cfg.focal_alpha, cfg.focal_gamma)
    return cfg.weight_cls * cls[:, None] + cfg.weight_coord * diff


def instability(W_prev: MatchAssignment, W_next: MatchAssignment) -> int:
    """Count of predictions whose matched index changed between snapshots."""
    a, b = W_prev.W, W_next.W
    if a.shape != b.shape:
        raise ValueError(f"assignment lengths differ: {a.shape} vs {b.shape}")
    return int(np.sum(a != b))
