from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .boxes import MatchResult
from .errors import DimensionError
from .tensor import Tensor


@dataclass
class LossBreakdown:
    cls_loss: float
    reg_loss: float
    total: float
    n_pos: int
    n_neg_mined: int
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)


def mine_negatives(cls_logits: np.ndarray, match: MatchResult, n_pos: int, mining_ratio: float) -> np.ndarray:
    """Indices of the highest-loss negatives, mining_ratio per positive (at least one positive's worth)."""
    negatives = match.negatives
    quota = min(int(mining_ratio * max(n_pos, 1)), negatives.size)
    if quota == 0:
        return negatives[:0]
    background_loss = -ops.log_softmax_np(cls_logits[negatives], axis=1)[:, 0]
    order = np.argsort(-background_loss, kind="stable")
    return negatives[order[:quota]]


def multibox_loss(
    cls_logits: Tensor,
    reg_preds: Tensor,
    match: MatchResult,
    gt_classes: np.ndarray,
    mining_ratio: float = 3.0,
    reg_weight: float = 1.0,
) -> LossBreakdown:
    """Softmax cross-entropy on positives + mined negatives and smooth-L1 on positives.

    `gt_classes` holds the foreground class (1..num_classes-1) of every ground
    truth; class 0 is background. Both terms are divided by max(n_pos, 1).
    """
    k = match.labels.shape[0]
    if cls_logits.shape[0] != k or reg_preds.shape != (k, 4):
        raise DimensionError(
            f"predictions {cls_logits.shape}/{reg_preds.shape} do not cover {k} anchors"
        )
    positives = match.positives
    n_pos = int(positives.size)
    mined = mine_negatives(cls_logits.data, match, n_pos, mining_ratio)
    norm = float(max(n_pos, 1))

    rows = np.concatenate([positives, mined])
    targets = np.concatenate([
        np.asarray(gt_classes, dtype=np.int64)[match.labels[positives]],
        np.zeros(mined.size, dtype=np.int64),
    ])
    cls_term = ops.mul(ops.cross_entropy(ops.index_select(cls_logits, rows), targets), 1.0 / norm)
    if n_pos:
        reg_term = ops.smooth_l1(ops.index_select(reg_preds, positives), match.targets[positives])
        reg_term = ops.mul(reg_term, reg_weight / norm)
    else:
        reg_term = ops.mul(ops.sum(reg_preds), 0.0)
    cls_value, reg_value = cls_term.item(), reg_term.item()
    return LossBreakdown(
        cls_loss=cls_value,
        reg_loss=reg_value,
        total=cls_value + reg_value,
        n_pos=n_pos,
        n_neg_mined=int(mined.size),
        graph=ops.add(cls_term, reg_term),
    )
