"""Default boxes, overlap, matching, box coding and non-maximum suppression.

Boxes are axial rectangles (x, y, w, h) carried with a slice position z.
Arrays of boxes use the column order (x, y, z, w, h). Two boxes only
overlap when their slices are within half the larger footprint of each
other.
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError


X, Y, Z, W, H = range(5)


@dataclass(frozen=True)
class AnchorBox:
    x: float
    y: float
    z: float
    w: float
    h: float
    level: str
    scale_idx: int
    ratio_idx: int


@dataclass
class Detection:
    x: float
    y: float
    z: float
    w: float
    h: float
    category: str
    prob: float
    scan_id: str = ""

    def box(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.h])


class Anchors:
    """Anchor boxes of one or more levels as parallel arrays."""

    def __init__(self, boxes: np.ndarray, levels: np.ndarray, scale_idx: np.ndarray, ratio_idx: np.ndarray):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        self.levels = np.asarray(levels)
        self.scale_idx = np.asarray(scale_idx, dtype=np.int64)
        self.ratio_idx = np.asarray(ratio_idx, dtype=np.int64)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __getitem__(self, i: int) -> AnchorBox:
        x, y, z, w, h = (float(v) for v in self.boxes[i])
        return AnchorBox(x, y, z, w, h, str(self.levels[i]), int(self.scale_idx[i]), int(self.ratio_idx[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def concat(cls, parts: Sequence["Anchors"]) -> "Anchors":
        if not parts:
            return cls(np.zeros((0, 5)), np.array([], dtype=object), np.zeros(0), np.zeros(0))
        return cls(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.levels for p in parts]),
            np.concatenate([p.scale_idx for p in parts]),
            np.concatenate([p.ratio_idx for p in parts]),
        )


@dataclass
class MatchResult:
    """Per-anchor labels: gt index for positives, NEGATIVE or IGNORED otherwise."""

    labels: np.ndarray
    targets: np.ndarray

    NEGATIVE = -1
    IGNORED = -2

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == self.NEGATIVE)


def generate_anchors(
    level_extents: Tuple[int, int, int],
    strides: Tuple[int, int, int],
    scales: Sequence[float],
    ratios: Sequence[float],
    level: str = "",
) -> Anchors:
    """One anchor per (position, scale, ratio), position-major."""
    if not scales or not ratios:
        raise ConfigurationError("generate_anchors needs at least one scale and one ratio")
    d, h, w = level_extents
    sd, sh, sw = strides
    zz, yy, xx = np.meshgrid(
        (np.arange(d) + 0.5) * sd,
        (np.arange(h) + 0.5) * sh,
        (np.arange(w) + 0.5) * sw,
        indexing="ij",
    )
    centers = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    shapes = []
    scale_ids, ratio_ids = [], []
    for si, s in enumerate(scales):
        for ri, r in enumerate(ratios):
            shapes.append((s * np.sqrt(r), s / np.sqrt(r)))
            scale_ids.append(si)
            ratio_ids.append(ri)
    shapes = np.asarray(shapes)
    a = len(shapes)
    p = centers.shape[0]
    boxes = np.concatenate([np.repeat(centers, a, axis=0), np.tile(shapes, (p, 1))], axis=1)
    return Anchors(
        boxes,
        np.full(p * a, level, dtype=object),
        np.tile(scale_ids, p),
        np.tile(ratio_ids, p),
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Axial IoU between every row of `a` (A, 5) and `b` (B, 5)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    ax1, ax2 = a[:, X, None] - a[:, W, None] / 2, a[:, X, None] + a[:, W, None] / 2
    ay1, ay2 = a[:, Y, None] - a[:, H, None] / 2, a[:, Y, None] + a[:, H, None] / 2
    bx1, bx2 = b[None, :, X] - b[None, :, W] / 2, b[None, :, X] + b[None, :, W] / 2
    by1, by2 = b[None, :, Y] - b[None, :, H] / 2, b[None, :, Y] + b[None, :, H] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = (a[:, W] * a[:, H])[:, None] + (b[:, W] * b[:, H])[None, :] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    reach = np.maximum(a[:, [W, H]].max(axis=1)[:, None], b[:, [W, H]].max(axis=1)[None, :]) / 2
    out[np.abs(a[:, Z, None] - b[None, :, Z]) > reach] = 0.0
    return np.clip(out, 0.0, 1.0)


def iou(a, b) -> float:
    """Axial IoU of two (x, y, z, w, h) boxes, anchors or detections."""
    def as_row(box) -> np.ndarray:
        if isinstance(box, (AnchorBox, Detection)):
            return np.array([box.x, box.y, box.z, box.w, box.h])
        return np.asarray(box, dtype=np.float64)

    return float(iou_matrix(as_row(a), as_row(b))[0, 0])


def encode_targets(anchors: np.ndarray, gts: np.ndarray, variances=(0.1, 0.2)) -> np.ndarray:
    """(tx, ty, tw, th) of each gt relative to its anchor."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 5)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    if np.any(gts[:, [W, H]] <= 0):
        raise DataError("ground-truth boxes must have positive width and height")
    vc, vs = variances
    return np.stack([
        (gts[:, X] - anchors[:, X]) / anchors[:, W] / vc,
        (gts[:, Y] - anchors[:, Y]) / anchors[:, H] / vc,
        np.log(gts[:, W] / anchors[:, W]) / vs,
        np.log(gts[:, H] / anchors[:, H]) / vs,
    ], axis=1)


def decode_box(anchors: np.ndarray, deltas: np.ndarray, variances=(0.1, 0.2)) -> np.ndarray:
    """Inverse of encode_targets; z is taken from the anchor."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 5)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    vc, vs = variances
    # exp overflow guard for untrained heads
    tw = np.clip(deltas[:, 2] * vs, -10.0, 10.0)
    th = np.clip(deltas[:, 3] * vs, -10.0, 10.0)
    return np.stack([
        anchors[:, X] + deltas[:, 0] * vc * anchors[:, W],
        anchors[:, Y] + deltas[:, 1] * vc * anchors[:, H],
        anchors[:, Z],
        anchors[:, W] * np.exp(tw),
        anchors[:, H] * np.exp(th),
    ], axis=1)


def _fallback_anchor(ious: np.ndarray, anchors: np.ndarray, gt: np.ndarray, taken: np.ndarray) -> int:
    order = np.lexsort((np.arange(len(ious)), -ious)) if ious.max() > 0 else None
    if order is None:
        dist = np.linalg.norm(anchors[:, [X, Y, Z]] - gt[[X, Y, Z]], axis=1)
        order = np.lexsort((np.arange(len(dist)), dist))
    for idx in order:
        if not taken[idx]:
            return int(idx)
    return int(order[0])


def match_anchors(
    anchors: Anchors,
    ground_truth: np.ndarray,
    pos_thr: float = 0.5,
    neg_thr: float = 0.4,
    variances=(0.1, 0.2),
) -> MatchResult:
    if len(anchors) == 0:
        raise ConfigurationError("cannot match against an empty anchor list")
    if pos_thr <= neg_thr:
        raise ConfigurationError(f"pos_thr {pos_thr} must exceed neg_thr {neg_thr}")
    gts = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 5)
    n = len(anchors)
    labels = np.full(n, MatchResult.NEGATIVE, dtype=np.int64)
    targets = np.zeros((n, 4))
    if gts.shape[0] == 0:
        return MatchResult(labels, targets)

    ious = iou_matrix(anchors.boxes, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= pos_thr] = best_gt[best_iou >= pos_thr]
    labels[(best_iou >= neg_thr) & (best_iou < pos_thr)] = MatchResult.IGNORED

    taken = np.zeros(n, dtype=bool)
    for g in range(gts.shape[0]):
        idx = _fallback_anchor(ious[:, g], anchors.boxes, gts[g], taken)
        labels[idx] = g
        taken[idx] = True

    pos = labels >= 0
    targets[pos] = encode_targets(anchors.boxes[pos], gts[labels[pos]], variances)
    return MatchResult(labels, targets)


def _suppress(boxes: np.ndarray, iou_thr: float) -> List[int]:
    keep: List[int] = []
    order = np.arange(boxes.shape[0])
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        if rest.size == 0:
            break
        overlap = iou_matrix(boxes[i], boxes[rest])[0]
        order = rest[overlap <= iou_thr]
    return keep


def _sort_key(d: Detection):
    return (-d.prob, d.x, d.y, d.z)


def nms(detections: Iterable[Detection], iou_thr: float = 0.3, max_out: Optional[int] = None) -> List[Detection]:
    """Greedy per-category suppression in descending probability."""
    if not 0.0 < iou_thr < 1.0:
        raise ConfigurationError(f"nms iou_thr must lie in (0, 1), got {iou_thr}")
    by_class = {}
    for d in detections:
        by_class.setdefault(d.category, []).append(d)
    survivors: List[Detection] = []
    for category in sorted(by_class):
        ranked = sorted(by_class[category], key=_sort_key)
        boxes = np.array([d.box() for d in ranked])
        survivors.extend(ranked[i] for i in _suppress(boxes, iou_thr))
    survivors.sort(key=_sort_key)
    return survivors if max_out is None else survivors[:max_out]
