"""Rectangle geometry: IoU, greedy NMS and top-k selection.

Boxes are continuous corner coordinates ``(x1, y1, x2, y2)`` with area
``(x2 - x1) * (y2 - y1)``. A box with non-positive width or height is
degenerate and has IoU 0 with everything, itself included.
"""

from __future__ import annotations

import logging

import numpy as np

from .types import BoxF, ProposalSet

logger = logging.getLogger(__name__)

DEBUG_DEGENERATE = False


def _coords(b) -> tuple[float, float, float, float]:
    if isinstance(b, BoxF):
        return b.x1, b.y1, b.x2, b.y2
    x1, y1, x2, y2 = b
    return float(x1), float(y1), float(x2), float(y2)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    if not (ax2 > ax1 and ay2 > ay1 and bx2 > bx1 and by2 > by1):
        if DEBUG_DEGENERATE:
            logger.warning("degenerate box in iou: %r %r", a, b)
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


iou_array = iou


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between M x 4 and K x 4 box arrays.

    Uses the same operation order as :func:`iou`, so entries are bit-identical
    to the scalar version.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1, ax2, ay2 = (a[:, k : k + 1] for k in range(4))
    bx1, by1, bx2, by2 = (b[:, k][None, :] for k in range(4))
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    valid_a = (ax2 > ax1) & (ay2 > ay1)
    valid_b = (bx2 > bx1) & (by2 > by1)
    hit = (iw > 0.0) & (ih > 0.0) & valid_a & valid_b
    inter = np.where(hit, iw * ih, 0.0)
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(hit, inter / np.where(hit, union, 1.0), 0.0)
    return out


def iou_one_to_many(box, boxes: np.ndarray) -> np.ndarray:
    return iou_matrix(np.asarray(_coords(box), dtype=np.float64), boxes)[0]


def descending_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep the lower index first."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(s.shape[0]), -s))


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS. A box is suppressed when its IoU with a kept box is
    strictly greater than ``iou_threshold``."""
    if len(scores) == 0:
        return []
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    arr = np.array([_coords(b) for b in boxes], dtype=np.float64).reshape(-1, 4)
    if arr.shape[0] != len(scores):
        raise ValueError(f"{arr.shape[0]} boxes but {len(scores)} scores")
    order = descending_order(scores)
    alive = np.ones(arr.shape[0], dtype=bool)
    keep: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive[i] = False
        overlaps = iou_matrix(arr[i], arr)[0]
        alive &= ~(overlaps > iou_threshold)
    return keep


def top_k_by_score(ps: ProposalSet, c: int, k: int) -> list[int]:
    """Indices of the ``k`` highest class-``c`` scores (column ``c`` of ``ps.scores``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = descending_order(ps.scores[:, c])
    return [int(i) for i in order[:k]]
