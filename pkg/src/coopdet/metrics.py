"""Detection evaluation (matching, average precision) and loss formulas."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import DetectionBox, rotated_iou
from .errors import ContractViolation

PROB_EPS = 1e-7


@dataclass(frozen=True)
class MatchResult:
    """Greedy one-to-one assignment of detections to ground truth."""

    det_matches: list  # per detection: matched gt index or None
    det_ious: list  # IoU with the matched gt (0.0 when unmatched)
    gt_covered: list  # per gt: True when some detection claimed it


def match_detections(dets: list[DetectionBox], gts: list[DetectionBox], iou_thresh: float) -> MatchResult:
    """Confidence-ordered greedy matching at an IoU threshold.

    Each detection takes the unmatched gt of highest IoU >= thresh;
    exact IoU ties resolve to the lowest gt index. Ranking ties on
    confidence keep the original detection order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    matches: list = [None] * len(dets)
    match_iou = [0.0] * len(dets)
    covered = [False] * len(gts)
    for i in order:
        best_j = None
        best = iou_thresh
        for j, gt in enumerate(gts):
            if covered[j]:
                continue
            iou = rotated_iou(dets[i], gt)
            if iou > best or (iou == best and iou >= iou_thresh and best_j is None):
                best = iou
                best_j = j
        if best_j is not None:
            covered[best_j] = True
            matches[i] = best_j
            match_iou[i] = best
    return MatchResult(matches, match_iou, covered)


@dataclass(frozen=True)
class APResult:
    value: float
    defined: bool  # False when there is no ground truth to recall
    n_gt: int
    n_det: int


def average_precision(frames: list[tuple[list, list]], iou_thresh: float) -> APResult:
    """All-point-interpolated AP over confidence-ranked pooled detections.

    ``frames`` is a list of (detections, ground_truths); matching is
    per-frame, the precision-recall curve pools every detection.
    """
    tp_conf: list[tuple[float, int, bool]] = []
    n_gt = 0
    n_det = 0
    for fi, (dets, gts) in enumerate(frames):
        n_gt += len(gts)
        n_det += len(dets)
        res = match_detections(dets, gts, iou_thresh)
        for i, det in enumerate(dets):
            tp_conf.append((det.confidence, fi, res.det_matches[i] is not None))
    if n_gt == 0:
        return APResult(0.0, False, 0, n_det)
    if n_det == 0:
        return APResult(0.0, True, n_gt, 0)

    tp_conf.sort(key=lambda t: (-t[0], t[1]))
    tps = np.cumsum([1.0 if hit else 0.0 for _, _, hit in tp_conf])
    fps = np.cumsum([0.0 if hit else 1.0 for _, _, hit in tp_conf])
    recall = tps / n_gt
    precision = tps / (tps + fps)

    # precision envelope, then area under the stepwise curve
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return APResult(float(ap), True, n_gt, n_det)


def focal_loss(pred_conf, target, gamma: float = 2.0, alpha_f: float = 0.25) -> float:
    """Mean focal loss, FL(p_t) = -alpha_f (1 - p_t)^gamma log(p_t)."""
    p = np.clip(np.asarray(pred_conf, np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, np.float64)
    if p.shape != t.shape:
        raise ContractViolation("prediction/target shapes differ")
    p_t = np.where(t == 1.0, p, 1.0 - p)
    fl = -alpha_f * (1.0 - p_t) ** gamma * np.log(p_t)
    return float(np.mean(fl))


def l1_loss(pred, target) -> float:
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ContractViolation("prediction/target shapes differ")
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - target)))


def total_loss(l_cla: float, l_reg: float, alpha: float = 1.0) -> float:
    """Weighted sum of the classification and regression terms."""
    return l_cla + alpha * l_reg


def cross_entropy(pred_conf, target) -> float:
    """Plain -log p_t; the gamma -> 0 limit of the focal loss at alpha_f=1."""
    return focal_loss(pred_conf, target, gamma=0.0, alpha_f=1.0)
