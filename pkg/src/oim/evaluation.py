"""VOC-style detection metrics (AP, mAP, CorLoc) and mined-instance recall."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import descending_order, iou, iou_matrix, nms
from .types import BoxF, GroundTruth, ProposalSet

logger = logging.getLogger(__name__)

IOU_MATCH = 0.5
AP_MODES = ("eleven_point", "area")


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: BoxF
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def _match_flags(dets: Sequence[Detection], gt_by_image: dict[str, list[BoxF]], iou_match: float) -> np.ndarray:
    order = descending_order([d.score for d in dets])
    matched = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_image.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        gts = gt_by_image.get(det.image_id, [])
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gts):
            if matched[det.image_id][g]:
                continue
            ov = iou(det.box, gbox)
            if ov > best_iou:
                best, best_iou = g, ov
        if best >= 0 and best_iou >= iou_match:
            matched[det.image_id][best] = True
            tp[rank] = True
    return tp


def precision_recall(tp: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / num_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    return precision, recall


def ap_from_curve(precision: np.ndarray, recall: np.ndarray, mode: str = "eleven_point") -> float:
    if mode == "eleven_point":
        total = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            hit = recall >= t - 1e-12
            total += float(np.max(precision[hit])) if np.any(hit) else 0.0
        return total / 11.0
    if mode == "area":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        idx = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    raise ValueError(f"unknown AP mode {mode!r}")


def average_precision(
    detections: Sequence[Detection],
    ground_truth: Iterable[GroundTruth],
    class_id: int,
    iou_match: float = IOU_MATCH,
    mode: str = "eleven_point",
) -> float | None:
    """AP for one class; ``None`` when the class has no ground-truth instance."""
    gt_by_image = {g.image_id: g.of_class(class_id) for g in ground_truth}
    num_gt = sum(len(v) for v in gt_by_image.values())
    if num_gt == 0:
        return None
    dets = [d for d in detections if d.class_id == class_id]
    if not dets:
        return 0.0
    tp = _match_flags(dets, gt_by_image, iou_match)
    precision, recall = precision_recall(tp, num_gt)
    return ap_from_curve(precision, recall, mode)


def mean_average_precision(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    num_classes: int,
    iou_match: float = IOU_MATCH,
    mode: str = "eleven_point",
) -> tuple[float, dict[int, float | None]]:
    per_class = {
        c: average_precision(detections, ground_truth, c, iou_match, mode) for c in range(1, num_classes + 1)
    }
    defined = [ap for ap in per_class.values() if ap is not None]
    return (math.fsum(defined) / len(defined) if defined else 0.0), per_class


def corloc(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    num_classes: int,
    iou_match: float = IOU_MATCH,
) -> tuple[float, dict[int, float | None]]:
    """Fraction of positive (image, class) pairs whose top detection hits a GT instance."""
    top: dict[tuple[str, int], Detection] = {}
    for d in detections:
        key = (d.image_id, d.class_id)
        if key not in top or d.score > top[key].score:
            top[key] = d
    hits: dict[int, list[bool]] = defaultdict(list)
    for g in ground_truth:
        for c in sorted(set(g.classes)):
            det = top.get((g.image_id, c))
            ok = det is not None and any(iou(det.box, b) >= iou_match for b in g.of_class(c))
            hits[c].append(ok)
    pairs = [h for c in hits for h in hits[c]]
    per_class = {
        c: (sum(hits[c]) / len(hits[c]) if hits.get(c) else None) for c in range(1, num_classes + 1)
    }
    return (sum(pairs) / len(pairs) if pairs else 0.0), per_class


def greedy_match_count(pred: np.ndarray, gt: np.ndarray, iou_match: float = IOU_MATCH) -> int:
    """One-to-one matches between two box sets, taking pairs by descending IoU."""
    if len(pred) == 0 or len(gt) == 0:
        return 0
    ov = iou_matrix(pred, gt)
    pairs = sorted(
        ((ov[i, j], i, j) for i in range(ov.shape[0]) for j in range(ov.shape[1]) if ov[i, j] >= iou_match),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_p, used_g, count = set(), set(), 0
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        count += 1
    return count


def instance_recall_counts(mined, ground_truth: Sequence[GroundTruth], iou_match: float = IOU_MATCH) -> tuple[int, int]:
    """``mined`` holds, per image, a list of ``(class_id, box)`` appearance-node boxes."""
    covered = total = 0
    for boxes, gt in zip(mined, ground_truth):
        by_class: dict[int, list] = defaultdict(list)
        for c, b in boxes:
            by_class[int(c)].append(np.asarray(b.as_list() if isinstance(b, BoxF) else b, dtype=np.float64))
        for c in sorted(set(gt.classes)):
            gt_arr = np.array([b.as_list() for b in gt.of_class(c)])
            pred = np.array(by_class.get(c, [])).reshape(-1, 4)
            covered += greedy_match_count(pred, gt_arr, iou_match)
            total += len(gt_arr)
    return covered, total


def instance_recall(mined, ground_truth: Sequence[GroundTruth], iou_match: float = IOU_MATCH) -> float:
    covered, total = instance_recall_counts(mined, ground_truth, iou_match)
    return covered / total if total else 0.0


def detections_from_scores(
    ps: ProposalSet,
    scores: np.ndarray,
    top_k: int = 100,
    nms_threshold: float = 0.3,
    classes: Iterable[int] | None = None,
) -> list[Detection]:
    """Per-class top-k proposals followed by NMS. ``scores`` is N x (C+1)."""
    out: list[Detection] = []
    num_classes = scores.shape[1] - 1
    for c in classes if classes is not None else range(1, num_classes + 1):
        col = np.clip(scores[:, c], 0.0, 1.0)
        cand = descending_order(col)[:top_k]
        keep = nms(ps.boxes[cand], col[cand], nms_threshold)
        for i in keep:
            j = int(cand[i])
            out.append(Detection(ps.image_id, c, BoxF.from_seq(ps.boxes[j]), float(col[j])))
    return out


def metrics_report(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruth],
    num_classes: int,
    corloc_detections: Sequence[Detection] | None = None,
    corloc_ground_truth: Sequence[GroundTruth] | None = None,
    instance_recall_value: float | None = None,
    mode: str = "eleven_point",
) -> dict:
    mAP, aps = mean_average_precision(detections, ground_truth, num_classes, mode=mode)
    cl, cls_corloc = corloc(
        corloc_detections if corloc_detections is not None else detections,
        corloc_ground_truth if corloc_ground_truth is not None else ground_truth,
        num_classes,
    )
    per_class = {str(c): {"ap": aps[c], "corloc": cls_corloc[c]} for c in range(1, num_classes + 1)}
    return {"per_class": per_class, "mAP": mAP, "CorLoc": cl, "instance_recall": instance_recall_value}


def gt_as_detections(ground_truth: Sequence[GroundTruth]) -> list[Detection]:
    return [
        Detection(g.image_id, c, b, 1.0) for g in ground_truth for b, c in zip(g.boxes, g.classes)
    ]
