"""Loss stack for the denoising and matching parts.

Instance classification uses a focal term on the per-query score; character
recognition uses CTC for positive/matched queries (background doubles as the
CTC blank) and, for negative denoising queries, an extra per-position
cross-entropy pushing every character to background; the background is thus
calculated twice (once by the focal term, once here). Center points and
boundary curves are trained with summed L1.

The same machinery serves both parts: the denoising part is routed by
construction (query row -> source instance), the matching part through the
Hungarian assignment. Per-part sums are normalized by the number of positive
queries in that part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .assignment import UNMATCHED, MatchAssignment, MatchCost, build_cost_matrix, hungarian_match
from .dn_queries import DnQueryBatch
from .geometry import sample_uniform

__all__ = [
    "LossWeights",
    "PredictionSet",
    "focal_cls_loss",
    "ctc_text_loss",
    "ctc_text_loss_batch",
    "ce_background_loss",
    "coord_l1_loss",
    "boundary_l1_loss",
    "instance_targets",
    "dn_loss",
    "matching_loss",
]

LOG_EPS = math.log(1e-30)
NEG = -1e30  # finite stand-in for -inf; keeps logsumexp gradients NaN-free


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    coord: float = 1.0
    bd: float = 0.5
    text_pos: float = 0.5
    text_neg: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.coord, self.bd, self.text_pos, self.text_neg) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PredictionSet:
    """Per-query decoder outputs for one forward pass (I query rows)."""

    instance_scores: torch.Tensor  # (I,) in (0, 1)
    char_logits: torch.Tensor  # (I, T, C+1); class C is background/blank
    center_points: torch.Tensor  # (I, T, 2)
    boundary_top: torch.Tensor  # (I, T, 2)
    boundary_bot: torch.Tensor  # (I, T, 2)

    def __post_init__(self):
        I, T = self.char_logits.shape[:2]
        if self.instance_scores.shape != (I,):
            raise ValueError("instance_scores must be (I,)")
        for name in ("center_points", "boundary_top", "boundary_bot"):
            if getattr(self, name).shape != (I, T, 2):
                raise ValueError(f"{name} must be (I, T, 2)")

    def __len__(self) -> int:
        return self.char_logits.shape[0]

    def narrow(self, start: int, length: int) -> "PredictionSet":
        """View of query rows [start, start+length); keeps autograd history."""
        return PredictionSet(
            instance_scores=self.instance_scores.narrow(0, start, length),
            char_logits=self.char_logits.narrow(0, start, length),
            center_points=self.center_points.narrow(0, start, length),
            boundary_top=self.boundary_top.narrow(0, start, length),
            boundary_bot=self.boundary_bot.narrow(0, start, length),
        )


def focal_cls_loss(
    scores: torch.Tensor,
    is_positive: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Summed focal classification loss over queries.

    Positive queries take -alpha (1-b)^gamma log b, the rest
    -(1-alpha) b^gamma log(1-b). Scores must lie strictly inside (0, 1).
    """
    if bool((scores <= 0).any() or (scores >= 1).any()):
        raise ValueError("scores must lie strictly inside (0, 1); clamp logits upstream")
    is_positive = is_positive.to(torch.bool)
    pos = alpha * (1.0 - scores) ** gamma * (-torch.log(scores))
    neg = (1.0 - alpha) * scores**gamma * (-torch.log1p(-scores))
    return torch.where(is_positive, pos, neg).sum()


def _validate_ctc_target(target, T: int) -> None:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    if len(target) + repeats > T:
        raise ValueError(
            f"target of length {len(target)} with {repeats} adjacent repeats "
            f"has no feasible alignment in {T} steps"
        )


def ctc_text_loss_batch(char_logits: torch.Tensor, targets: list) -> torch.Tensor:
    """CTC negative log-likelihood per sequence, shape (B,).

    char_logits is (B, T, C+1) with class C the blank; each target is a
    sequence of indices < C. Log-softmax is applied per step (floored at
    log 1e-30) and the forward DP runs over blank-interleaved targets.
    """
    B, T, V = char_logits.shape
    blank = V - 1
    lengths = []
    for tgt in targets:
        tgt = list(tgt)
        if any(c >= blank or c < 0 for c in tgt):
            raise ValueError("CTC targets must not contain the blank/background index")
        _validate_ctc_target(tgt, T)
        lengths.append(len(tgt))
    L_max = max(lengths) if lengths else 0
    S_max = 2 * L_max + 1

    ext = torch.full((B, S_max), blank, dtype=torch.long)
    for b, tgt in enumerate(targets):
        for i, c in enumerate(tgt):
            ext[b, 2 * i + 1] = int(c)

    log_probs = torch.log_softmax(char_logits, dim=-1).clamp_min(LOG_EPS)

    # lane s may also come from s-2 when it is a label differing from lane s-2
    ext_shift2 = torch.full_like(ext, blank)
    ext_shift2[:, 2:] = ext[:, :-2]
    allow_skip = (ext != blank) & (ext != ext_shift2)

    neg = torch.full((B, S_max), NEG, dtype=char_logits.dtype)
    start = neg.clone()
    start[:, 0] = 0.0
    if S_max > 1:
        start[:, 1] = 0.0
    emit = torch.gather(log_probs[:, 0], 1, ext)  # (B, S)
    alpha = start + emit
    for t in range(1, T):
        from_same = alpha
        from_prev = torch.cat([neg[:, :1], alpha[:, :-1]], dim=1)
        from_skip = torch.cat([neg[:, :2], alpha[:, :-2]], dim=1)
        from_skip = torch.where(allow_skip, from_skip, torch.full_like(from_skip, NEG))
        merged = torch.logsumexp(torch.stack([from_same, from_prev, from_skip]), dim=0)
        alpha = merged + torch.gather(log_probs[:, t], 1, ext)

    S = torch.as_tensor([2 * L + 1 for L in lengths], dtype=torch.long)
    last = torch.gather(alpha, 1, (S - 1).unsqueeze(1)).squeeze(1)
    has_label = S >= 2
    second = torch.gather(alpha, 1, (S - 2).clamp_min(0).unsqueeze(1)).squeeze(1)
    second = torch.where(has_label, second, torch.full_like(second, NEG))
    return -torch.logsumexp(torch.stack([last, second]), dim=0)


def ctc_text_loss(char_logits: torch.Tensor, target) -> torch.Tensor:
    """CTC loss for a single query; char_logits is (T, C+1)."""
    return ctc_text_loss_batch(char_logits.unsqueeze(0), [list(target)]).squeeze(0)


def ce_background_loss(char_logits: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy against the background class over the T positions.

    Accepts (T, C+1) for one query or (B, T, C+1) batched, returning a scalar
    or a (B,) vector respectively.
    """
    log_probs = torch.log_softmax(char_logits, dim=-1)
    return -log_probs[..., -1].mean(dim=-1)


def coord_l1_loss(pred_points: torch.Tensor, gt_points: torch.Tensor) -> torch.Tensor:
    """Sum over points of |dx| + |dy|; (T, 2) inputs or batched (..., T, 2)."""
    if pred_points.shape != gt_points.shape:
        raise ValueError(f"point sets disagree: {pred_points.shape} vs {gt_points.shape}")
    return (pred_points - gt_points).abs().sum(dim=(-1, -2))


def boundary_l1_loss(pred_top, pred_bot, gt_top, gt_bot) -> torch.Tensor:
    """Summed L1 over both boundary curves."""
    return coord_l1_loss(pred_top, gt_top) + coord_l1_loss(pred_bot, gt_bot)


def instance_targets(instances, T: int, dtype=torch.float64) -> dict:
    """Sampled ground-truth point sets and transcripts for a list of instances."""
    center = np.stack([sample_uniform(inst.center, T) for inst in instances])
    top = np.stack([sample_uniform(inst.top, T) for inst in instances])
    bot = np.stack([sample_uniform(inst.bottom, T) for inst in instances])
    return {
        "center": torch.as_tensor(center, dtype=dtype),
        "top": torch.as_tensor(top, dtype=dtype),
        "bot": torch.as_tensor(bot, dtype=dtype),
        "transcripts": [list(inst.transcript) for inst in instances],
    }


def dn_loss(
    predictions: PredictionSet,
    batch: DnQueryBatch,
    gt_instances,
    w: LossWeights = LossWeights(),
    targets: dict | None = None,
):
    """Denoising-part loss; routing is fixed by construction.

    Prediction rows follow the batch layout: per group, n positive rows then
    n negative rows. Positive rows take focal + CTC + coordinate + boundary
    terms against their source instance; negative rows take the focal
    negative branch plus the background cross-entropy (BCT). Returns
    (total, per-term breakdown of unweighted, normalized tensors).
    """
    g, n = batch.g, batch.n
    if len(predictions) != batch.num_queries:
        raise ValueError(f"expected {batch.num_queries} denoising rows, got {len(predictions)}")
    gt_instances = list(gt_instances)[:n]
    if len(gt_instances) != n:
        raise ValueError(f"expected {n} ground-truth instances, got {len(gt_instances)}")
    if tuple(inst.id for inst in gt_instances) != batch.groups[0].source_ids:
        raise ValueError("ground-truth instances are not aligned with the batch's source_ids")
    T = predictions.char_logits.shape[1]
    if targets is None:
        targets = instance_targets(gt_instances, T, dtype=predictions.center_points.dtype)

    pos_rows, neg_rows = [], []
    for j in range(g):
        pos_rows.extend(range(j * 2 * n, j * 2 * n + n))
        neg_rows.extend(range(j * 2 * n + n, (j + 1) * 2 * n))
    pos_idx = torch.as_tensor(pos_rows, dtype=torch.long)
    neg_idx = torch.as_tensor(neg_rows, dtype=torch.long)

    scores = predictions.instance_scores
    is_positive = torch.zeros(len(predictions), dtype=torch.bool)
    is_positive[pos_idx] = True
    cls = focal_cls_loss(scores, is_positive, w.focal_alpha, w.focal_gamma)

    transcripts = [targets["transcripts"][i % n] for i in range(g * n)]
    text_pos = ctc_text_loss_batch(predictions.char_logits[pos_idx], transcripts).sum()
    text_neg = ce_background_loss(predictions.char_logits[neg_idx]).sum()

    coord = coord_l1_loss(
        predictions.center_points[pos_idx], targets["center"].repeat(g, 1, 1)
    ).sum()
    bd = boundary_l1_loss(
        predictions.boundary_top[pos_idx],
        predictions.boundary_bot[pos_idx],
        targets["top"].repeat(g, 1, 1),
        targets["bot"].repeat(g, 1, 1),
    ).sum()

    num_pos = g * n
    breakdown = {
        "cls": cls / num_pos,
        "text_pos": text_pos / num_pos,
        "text_neg": text_neg / num_pos,
        "coord": coord / num_pos,
        "bd": bd / num_pos,
    }
    total = (
        w.cls * breakdown["cls"]
        + w.text_pos * breakdown["text_pos"]
        + w.text_neg * breakdown["text_neg"]
        + w.coord * breakdown["coord"]
        + w.bd * breakdown["bd"]
    )
    return total, breakdown


def matching_loss(
    predictions: PredictionSet,
    gt_instances,
    w: LossWeights = LossWeights(),
    cost_cfg: MatchCost = MatchCost(),
    targets: dict | None = None,
):
    """Matching-part loss, routed through the Hungarian assignment.

    Matched queries take the full positive stack, unmatched queries the focal
    negative branch. Returns (total, breakdown, assignment).
    """
    gt_instances = list(gt_instances)
    K = len(predictions)
    T = predictions.char_logits.shape[1]
    M = len(gt_instances)
    device_dtype = predictions.center_points.dtype

    if M == 0:
        W = MatchAssignment(W=np.full(K, UNMATCHED, dtype=np.int64))
    else:
        cost = build_cost_matrix(
            predictions.instance_scores.detach().numpy(),
            predictions.center_points.detach().numpy(),
            gt_instances,
            cost_cfg,
        )
        W = hungarian_match(cost)

    is_positive = torch.as_tensor(W.W != UNMATCHED)
    cls = focal_cls_loss(predictions.instance_scores, is_positive, w.focal_alpha, w.focal_gamma)

    zero = torch.zeros((), dtype=device_dtype)
    text_pos = zero
    coord = zero
    bd = zero
    if M > 0:
        if targets is None:
            targets = instance_targets(gt_instances, T, dtype=device_dtype)
        rows = np.nonzero(W.W != UNMATCHED)[0]
        cols = W.W[rows]
        rows_t = torch.as_tensor(rows, dtype=torch.long)
        cols_t = torch.as_tensor(cols, dtype=torch.long)
        text_pos = ctc_text_loss_batch(
            predictions.char_logits[rows_t], [targets["transcripts"][m] for m in cols]
        ).sum()
        coord = coord_l1_loss(predictions.center_points[rows_t], targets["center"][cols_t]).sum()
        bd = boundary_l1_loss(
            predictions.boundary_top[rows_t],
            predictions.boundary_bot[rows_t],
            targets["top"][cols_t],
            targets["bot"][cols_t],
        ).sum()

    num_pos = max(M, 1)
    breakdown = {
        "cls": cls / num_pos,
        "text_pos": text_pos / num_pos,
        "coord": coord / num_pos,
        "bd": bd / num_pos,
    }
    total = (
        w.cls * breakdown["cls"]
        + w.text_pos * breakdown["text_pos"]
        + w.coord * breakdown["coord"]
        + w.bd * breakdown["bd"]
    )
    return total, breakdown, W
