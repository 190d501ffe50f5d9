"""One-to-one label assignment and the set-prediction training loss.

Costs may be +inf to forbid a pairing (the spatial prior). The solver
maximizes matched-pair count first, then minimizes total cost, so a target
is only left unmatched when no finite-cost prediction remains for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .geometry import GroundTruth, center_inside, giou

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
_COST_EPS = 1e-8


@dataclass
class MatchResult:
    """Pairs of (prediction index, target index) plus the leftovers."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_predictions: list[int] = field(default_factory=list)
    unmatched_targets: list[int] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def matched_predictions(self) -> list[int]:
        return [i for i, _ in self.pairs]

    @property
    def matched_targets(self) -> list[int]:
        return [j for _, j in self.pairs]


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment allowing +inf entries.

    Returns the minimum-cost matching among maximum-size matchings restricted
    to finite entries. Infeasible (+inf) pairs are replaced by a sentinel
    strictly above any realizable finite cost sum, solved, then stripped, so
    infeasibility shrinks the matching instead of poisoning the total.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if np.isnan(c).any():
        raise ValueError("cost matrix contains NaN")
    n, m = c.shape
    finite = np.isfinite(c)
    if n == 0 or m == 0 or not finite.any():
        return MatchResult(unmatched_predictions=list(range(n)),
                           unmatched_targets=list(range(m)))
    lo = c[finite].min()
    hi = c[finite].max()
    sentinel = (hi - lo) * min(n, m) + 1.0
    shifted = np.where(finite, c - lo, sentinel)
    rows, cols = linear_sum_assignment(shifted)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if finite[i, j]]
    pairs.sort()
    matched_i = {i for i, _ in pairs}
    matched_j = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_predictions=[i for i in range(n) if i not in matched_i],
        unmatched_targets=[j for j in range(m) if j not in matched_j],
        total_cost=float(sum(c[i, j] for i, j in pairs)),
    )


def focal_cost(prob: float, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> float:
    """Classification term of the matching cost for a foreground target."""
    p = float(prob)
    pos = alpha * (1.0 - p) ** gamma * (-np.log(p + _COST_EPS))
    neg = (1.0 - alpha) * p ** gamma * (-np.log(1.0 - p + _COST_EPS))
    return pos - neg


def matching_cost(prob: float, pred_box, target_box, image_size,
                  lambda_cls: float = 2.0, lambda_l1: float = 5.0,
                  lambda_giou: float = 2.0) -> float:
    """Pair cost with the spatial prior: +inf unless the prediction's center
    falls inside the target box."""
    if not center_inside(pred_box, target_box):
        return float("inf")
    w, h = float(image_size[0]), float(image_size[1])
    p = np.asarray(pred_box, dtype=np.float64)
    t = np.asarray(target_box, dtype=np.float64)
    scale = np.array([w, h, w, h])
    l1 = np.abs(p / scale - t / scale).sum()
    return (lambda_cls * focal_cost(prob)
            + lambda_l1 * float(l1)
            + lambda_giou * (1.0 - giou(pred_box, target_box)))


def cost_matrix(probs, boxes, targets, image_size, lambda_cls: float = 2.0,
                lambda_l1: float = 5.0, lambda_giou: float = 2.0) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) if len(probs) else np.zeros((0, 4))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4) if np.size(targets) else np.zeros((0, 4))
    out = np.full((boxes.shape[0], targets.shape[0]), np.inf)
    for i in range(boxes.shape[0]):
        for j in range(targets.shape[0]):
            out[i, j] = matching_cost(probs[i], boxes[i], targets[j], image_size,
                                      lambda_cls, lambda_l1, lambda_giou)
    return out


def _remap_targets(match: MatchResult, kept: list[int], total: int) -> MatchResult:
    """Rewrite target indices of a reduced-target matching back to the full set."""
    pairs = [(i, kept[j]) for i, j in match.pairs]
    matched_j = {j for _, j in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_predictions=match.unmatched_predictions,
        unmatched_targets=[j for j in range(total) if j not in matched_j],
        total_cost=match.total_cost,
    )


def assign_progressive(accepted_probs, accepted_boxes, noisy_probs, noisy_boxes,
                       gt: GroundTruth, image_size, lambda_cls: float = 2.0,
                       lambda_l1: float = 5.0, lambda_giou: float = 2.0
                       ) -> tuple[MatchResult, MatchResult]:
    """Two-phase assignment: accepted predictions claim targets first, noisy
    predictions are matched against whatever remains."""
    targets = gt.boxes
    lam = (lambda_cls, lambda_l1, lambda_giou)
    cost_h = cost_matrix(accepted_probs, accepted_boxes, targets, image_size, *lam)
    match_h = hungarian(cost_h)
    claimed = set(match_h.matched_targets)
    remaining = [j for j in range(targets.shape[0]) if j not in claimed]
    cost_l = cost_matrix(noisy_probs, noisy_boxes, targets[remaining], image_size, *lam)
    match_l = _remap_targets(hungarian(cost_l), remaining, targets.shape[0])
    # targets claimed in phase 1 are not "unmatched" for phase 2 reporting
    match_l.unmatched_targets = [j for j in match_l.unmatched_targets if j not in claimed]
    return match_h, match_l


def assign_merged(accepted_probs, accepted_boxes, noisy_probs, noisy_boxes,
                  gt: GroundTruth, image_size, lambda_cls: float = 2.0,
                  lambda_l1: float = 5.0, lambda_giou: float = 2.0
                  ) -> tuple[MatchResult, MatchResult]:
    """Single joint assignment over the union, split afterwards by pool."""
    targets = gt.boxes
    n_h = len(np.asarray(accepted_probs).reshape(-1))
    probs = np.concatenate([np.asarray(accepted_probs, dtype=np.float64).reshape(-1),
                            np.asarray(noisy_probs, dtype=np.float64).reshape(-1)])
    if probs.size:
        a = np.asarray(accepted_boxes, dtype=np.float64).reshape(-1, 4) if n_h else np.zeros((0, 4))
        b = np.asarray(noisy_boxes, dtype=np.float64).reshape(-1, 4) if probs.size - n_h else np.zeros((0, 4))
        boxes = np.vstack([a, b])
    else:
        boxes = np.zeros((0, 4))
    cost = cost_matrix(probs, boxes, targets, image_size,
                       lambda_cls, lambda_l1, lambda_giou)
    merged = hungarian(cost)
    pairs_h = [(i, j) for i, j in merged.pairs if i < n_h]
    pairs_l = [(i - n_h, j) for i, j in merged.pairs if i >= n_h]
    matched_t = {j for _, j in merged.pairs}
    unmatched_t = [j for j in range(targets.shape[0]) if j not in matched_t]
    match_h = MatchResult(
        pairs=pairs_h,
        unmatched_predictions=[i for i in range(n_h)
                               if i not in {p for p, _ in pairs_h}],
        unmatched_targets=unmatched_t,
        total_cost=float(sum(cost[i, j] for i, j in pairs_h)),
    )
    n_l = probs.size - n_h
    match_l = MatchResult(
        pairs=pairs_l,
        unmatched_predictions=[i for i in range(n_l)
                               if i not in {p for p, _ in pairs_l}],
        unmatched_targets=unmatched_t,
        total_cost=float(sum(cost[i + n_h, j] for i, j in pairs_l)),
    )
    return match_h, match_l


def filter_training_samples(scores, matched_indices, boxes, ignore_regions,
                            negative_filter: float = 0.05,
                            ignore_ioa: float = 0.7) -> list[int]:
    """Indices of noisy predictions that participate in the loss.

    Matched positives are always kept. Negatives are dropped when their score
    is already below `negative_filter` (well-classified) or when they overlap
    an ignore region with IoA above `ignore_ioa`.
    """
    from .geometry import pairwise_ioa

    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    matched = set(int(i) for i in matched_indices)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) if scores.size else np.zeros((0, 4))
    regions = np.asarray(ignore_regions, dtype=np.float64)
    if regions.size:
        max_ioa = pairwise_ioa(boxes, regions).max(axis=1)
    else:
        max_ioa = np.zeros(scores.shape[0])
    keep = []
    for i in range(scores.shape[0]):
        if i in matched:
            keep.append(i)
        elif scores[i] < negative_filter or max_ioa[i] > ignore_ioa:
            continue
        else:
            keep.append(i)
    return keep


def set_loss(tape: ad.Tape, noisy_logits: ad.Tensor2, matched_indices,
             keep_indices, lambda_cls: float = 2.0, alpha: float = FOCAL_ALPHA,
             gamma: float = FOCAL_GAMMA) -> ad.Tensor2:
    """Focal classification loss over the kept noisy predictions.

    Positives are the matched predictions; boxes are identity-mapped at this
    stage so there is no regression term. Normalized by the positive count.
    """
    keep = [int(i) for i in keep_indices]
    matched = {int(i) for i in matched_indices}
    if not keep:
        return ad.affine(tape, ad.Tensor2(np.zeros((1, 1))))
    kept_logits = ad.gather_rows(tape, noisy_logits, keep)
    targets = np.array([[1.0 if i in matched else 0.0] for i in keep])
    elem = ad.focal_bce(tape, kept_logits, targets, alpha=alpha, gamma=gamma)
    norm = lambda_cls / max(1, len(matched & set(keep)))
    return ad.affine(tape, ad.sum_all(tape, elem), norm)
