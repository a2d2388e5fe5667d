"""Evaluation metrics: rank AUC, Dice overlap, mAP over IoU thresholds."""

from __future__ import annotations

import numpy as np

MAP_IOU_THRESHOLDS = tuple(0.40 + 0.05 * i for i in range(8))  # 0.40 .. 0.75


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(probs, labels, n_classes: int | None = None) -> float:
    """One-vs-rest AUC per class, macro-averaged over classes present."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = probs.shape[1]
    aucs = []
    for k in range(n_classes):
        mask = (labels == k).astype(int)
        if mask.sum() in (0, len(labels)):
            continue
        aucs.append(binary_auc(probs[:, k], mask))
    if not aucs:
        raise ValueError("no class with both positives and negatives")
    return float(np.mean(aucs))


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    return float((predicted == labels).mean())


def dice_coefficient(pred_mask, gt_mask) -> float:
    """2|A∩B| / (|A|+|B|); both-empty counts as a perfect 1.0."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * int((a & b).sum()) / total)


def box_iou(a, b) -> float:
    """IoU of two (x, y, w, h) boxes in continuous coordinates."""
    ax0, ay0, aw, ah = (float(v) for v in a)
    bx0, by0, bw, bh = (float(v) for v in b)
    ix = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def average_precision(detections, gt_boxes, iou_threshold: float) -> float:
    """AP for one IoU threshold.

    detections: list of (image_id, box, score); gt_boxes: image_id -> list of
    boxes. Detections are matched greedily by descending score, each taking
    the highest-IoU unmatched ground truth above the threshold.
    """
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return 0.0
    dets = sorted(detections, key=lambda d: -d[2])
    matched: dict[int, set[int]] = {img: set() for img in gt_boxes}
    tp = np.zeros(len(dets))
    for i, (img, box, _score) in enumerate(dets):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes.get(img, [])):
            if j in matched.get(img, set()):
                continue
            iou = box_iou(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[img].add(best_j)
            tp[i] = 1.0
    if len(dets) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(dets) + 1)
    # precision envelope, integrated at every recall step
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def mean_average_precision(detections, gt_boxes,
                           thresholds=MAP_IOU_THRESHOLDS) -> float:
    return float(np.mean([average_precision(detections, gt_boxes, t)
                          for t in thresholds]))
