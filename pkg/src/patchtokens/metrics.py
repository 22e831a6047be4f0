"""Evaluation metrics on normalised xyxy boxes and boolean pixel masks.

cIoU is cumulative intersection over cumulative union across the whole split
(not a mean of per-sample IoUs).  AP uses COCO-style greedy matching by
descending score and 101-point interpolation by default.  Greedy
precision/recall for captions matches predictions in emission order.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


def box_iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def accuracy_at(ious: Sequence[float], threshold: float) -> float:
    """Fraction of samples whose IoU exceeds ``threshold``; missing = IoU 0."""
    ious = np.asarray(list(ious), dtype=np.float64)
    if ious.size == 0:
        return 0.0
    return float((ious > threshold).mean())


def cumulative_iou(preds: Iterable[np.ndarray | None], gts: Iterable[np.ndarray]) -> float:
    inter = 0
    union = 0
    for p, g in zip(preds, gts):
        g = np.asarray(g, dtype=bool)
        if p is None:
            union += int(g.sum())
            continue
        p = np.asarray(p, dtype=bool)
        inter += int((p & g).sum())
        union += int((p | g).sum())
    return float(inter / union) if union else 0.0


def _interpolated_ap(tp: np.ndarray, n_gt: int, points: int) -> float:
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # precision envelope, monotone non-increasing in recall
    env = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, points)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < env.size, env[np.minimum(idx, env.size - 1)], 0.0)
    return float(vals.mean())


def match_detections(dets: list[tuple[float, int, np.ndarray]], gts: dict[int, list[np.ndarray]], thr: float) -> np.ndarray:
    """TP flags for ``(score, image_id, box)`` detections sorted by score desc."""
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(dets), dtype=np.float64)
    for i, (_, img, box) in enumerate(dets):
        best, best_j = thr, -1
        for j, g in enumerate(gts.get(img, [])):
            if used[img][j]:
                continue
            iou = box_iou(box, g)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[i] = 1.0
    return tp


def average_precision(
    detections: Iterable[tuple[int, str, float, Sequence[float]]],
    ground_truth: Iterable[tuple[int, str, Sequence[float]]],
    iou_threshold: float = 0.5,
    points: int = 101,
) -> dict[str, float]:
    """Per-category AP.

    ``detections``: ``(image_id, category, score, box)``; ``ground_truth``:
    ``(image_id, category, box)``.  Categories without ground truth are
    omitted from the result.
    """
    gts: dict[str, dict[int, list[np.ndarray]]] = defaultdict(lambda: defaultdict(list))
    for img, cat, box in ground_truth:
        gts[cat][img].append(np.asarray(box, dtype=np.float64))
    dets: dict[str, list] = defaultdict(list)
    for img, cat, score, box in detections:
        dets[cat].append((float(score), img, np.asarray(box, dtype=np.float64)))
    out = {}
    for cat, per_img in gts.items():
        d = sorted(dets.get(cat, []), key=lambda x: -x[0])
        tp = match_detections(d, per_img, iou_threshold)
        n_gt = sum(len(v) for v in per_img.values())
        out[cat] = _interpolated_ap(tp, n_gt, points)
    return out


def mean_ap(detections, ground_truth, thresholds=(0.5,), points: int = 101) -> float:
    detections = list(detections)
    ground_truth = list(ground_truth)
    vals = []
    for t in thresholds:
        per_cat = average_precision(detections, ground_truth, float(t), points)
        vals.extend(per_cat.values())
    return float(np.mean(vals)) if vals else 0.0


def greedy_precision_recall(pred_boxes: Sequence, gt_boxes: Sequence, threshold: float = 0.5) -> tuple[int, int, int]:
    """Match predictions in emission order; returns (true positives, n_pred, n_gt)."""
    used = np.zeros(len(gt_boxes), dtype=bool)
    tp = 0
    for p in pred_boxes:
        best, best_j = threshold, -1
        for j, g in enumerate(gt_boxes):
            if used[j]:
                continue
            iou = box_iou(p, g)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            tp += 1
    return tp, len(pred_boxes), len(gt_boxes)
