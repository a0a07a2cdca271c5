"""Set prediction objective: focal classification plus matched box regression.

Predictions are a fixed-size set of (box, probability) pairs; ground truths
are matched to predictions one-to-one by minimum-cost bipartite assignment,
and the loss combines a focal classification term over every query with L1
and GIoU terms over the matched pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad

# probabilities are clamped this far away from {0, 1} before any log
PROB_EPS = 1e-7


class LossError(ValueError):
    """Invalid loss input (bad boxes, empty cost matrix, too many targets)."""


@dataclass(frozen=True)
class FocalParams:
    """Balancing factor and focusing exponent of the focal loss."""

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise LossError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise LossError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class CostWeights:
    """Term weights shared by the matching cost and the training loss."""

    lambda_class: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        terms = (self.lambda_class, self.lambda_l1, self.lambda_giou)
        if any(w < 0.0 for w in terms):
            raise LossError("cost weights must be non-negative")
        if all(w == 0.0 for w in terms):
            raise LossError("at least one cost weight must be positive")


@dataclass(frozen=True)
class MatchAssignment:
    """Minimum-cost pairing; pairs are (prediction index, ground-truth index)."""

    pairs: tuple


def focal_loss(p, params: FocalParams = FocalParams()):
    """-alpha * (1 - p)^gamma * log(p) with p clamped away from {0, 1}.

    `p` is the probability assigned to the correct class: the predicted
    probability itself for positives, its complement for background (with
    alpha likewise replaced by 1 - alpha by the caller). Accepts a float,
    an array, or a Tensor and returns the matching kind.
    """
    if isinstance(p, ad.Tensor):
        q = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        return ad.log(q) * ((1.0 - q) ** params.gamma) * (-params.alpha)
    q = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -params.alpha * (1.0 - q) ** params.gamma * np.log(q)


# -- box geometry ----------------------------------------------------------


def _corners(boxes: np.ndarray):
    cx, cy, w, h = (boxes[..., i] for i in range(4))
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_giou(a, b):
    """IoU and generalized IoU of center-size boxes; broadcasts over leading axes.

    GIoU subtracts from IoU the fraction of the enclosing hull not covered
    by the union, so disjoint boxes score negative and the range is [-1, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a[..., 2:] <= 0) or np.any(b[..., 2:] <= 0):
        raise LossError("box width and height must be positive")
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    iou = inter / union
    hull = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * \
           (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    giou = iou - (hull - union) / hull
    if a.ndim == 1 and b.ndim == 1:
        return float(iou), float(giou)
    return iou, giou


def _giou_rows(boxes: ad.Tensor, gt: np.ndarray) -> ad.Tensor:
    """Differentiable GIoU of each predicted box against its paired target."""
    px0 = boxes[:, 0] - boxes[:, 2] * 0.5
    py0 = boxes[:, 1] - boxes[:, 3] * 0.5
    px1 = boxes[:, 0] + boxes[:, 2] * 0.5
    py1 = boxes[:, 1] + boxes[:, 3] * 0.5
    gx0, gy0, gx1, gy1 = _corners(gt)
    iw = ad.relu(ad.minimum(px1, gx1) - ad.maximum(px0, gx0))
    ih = ad.relu(ad.minimum(py1, gy1) - ad.maximum(py0, gy0))
    inter = iw * ih
    union = boxes[:, 2] * boxes[:, 3] + gt[:, 2] * gt[:, 3] - inter
    hull = (ad.maximum(px1, gx1) - ad.minimum(px0, gx0)) * \
           (ad.maximum(py1, gy1) - ad.minimum(py0, gy0))
    return inter / union - (hull - union) / hull


# -- matching --------------------------------------------------------------


def matching_cost(preds, gts, focal: FocalParams = FocalParams(),
                  weights: CostWeights = CostWeights()) -> np.ndarray:
    """Cost matrix (N_q, N_gt) used for assignment; evaluated without gradients.

    The class column is the focal term for predicting the target minus
    the focal term for predicting background, so confident correct
    predictions get a negative (attractive) cost.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0] == 0:
        raise LossError("matching requires at least one ground truth")
    p = np.clip(np.asarray(preds.class_prob.data, dtype=np.float64),
                PROB_EPS, 1.0 - PROB_EPS)
    pos = -focal.alpha * (1.0 - p) ** focal.gamma * np.log(p)
    neg = -(1.0 - focal.alpha) * p ** focal.gamma * np.log(1.0 - p)
    class_cost = pos - neg
    boxes = np.asarray(preds.boxes.data, dtype=np.float64)
    l1 = np.abs(boxes[:, None, :] - gts[None, :, :]).sum(axis=-1)
    _, giou = iou_giou(boxes[:, None, :], gts[None, :, :])
    return (weights.lambda_class * class_cost[:, None]
            + weights.lambda_l1 * l1
            + weights.lambda_giou * (-giou))


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum total cost assignment; pairs come back sorted by prediction index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise LossError("cost matrix must be 2D and non-empty")
    if not np.all(np.isfinite(cost)):
        raise LossError("cost matrix entries must be finite")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    return MatchAssignment(tuple(zip(rows[order].tolist(), cols[order].tolist())))


# -- training loss ---------------------------------------------------------


def set_loss(preds, gts, focal: FocalParams = FocalParams(),
             weights: CostWeights = CostWeights()):
    """Total loss and per-term breakdown for one image.

    Classification averages the focal term over all queries (matched queries
    against the positive class, the rest against background); L1 and GIoU
    terms average over ground truths. Returns (total Tensor, breakdown dict)
    where the breakdown holds the weighted float contributions.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n_q = preds.class_prob.shape[0]
    n_gt = gts.shape[0]
    if n_gt > n_q:
        raise LossError(f"{n_gt} ground truths exceed {n_q} queries")

    target = np.zeros(n_q)
    if n_gt > 0:
        assign = hungarian_match(matching_cost(preds, gts, focal, weights))
        rows = np.array([r for r, _ in assign.pairs])
        cols = np.array([c for _, c in assign.pairs])
        target[rows] = 1.0

    p = ad.clip(preds.class_prob, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.log(p) * ((1.0 - p) ** focal.gamma) * (-focal.alpha)
    neg = ad.log(1.0 - p) * (p ** focal.gamma) * (-(1.0 - focal.alpha))
    class_term = ((pos * target) + (neg * (1.0 - target))).sum() * (1.0 / n_q)

    if n_gt > 0:
        matched = preds.boxes[rows]
        paired = gts[cols]
        l1_term = ad.absolute(matched - paired).sum() * (1.0 / n_gt)
        giou_term = (1.0 - _giou_rows(matched, paired)).sum() * (1.0 / n_gt)
    else:
        l1_term = ad.constant(0.0)
        giou_term = ad.constant(0.0)

    total = (class_term * weights.lambda_class
             + l1_term * weights.lambda_l1
             + giou_term * weights.lambda_giou)
    breakdown = {
        "class": weights.lambda_class * class_term.item(),
        "l1": weights.lambda_l1 * l1_term.item(),
        "giou": weights.lambda_giou * giou_term.item(),
        "total": total.item(),
    }
    return total, breakdown
