"""Detection metrics: mAP at fixed IoU, FROC recall at FPI budgets, F1 and
image-level AUC.

Inputs are per-image lists: detections as (box, class_id, score) and ground
truth as (box, class_id). Matching is greedy in score order (ties broken by
image index, then detection index), a detection may claim only an unmatched
ground-truth object of its own class with IoU at or above the threshold, and
among those it takes the highest-IoU one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import ModelParams, forward
from .world import BBox, DetectionSample, iou

FPI_POINTS = (0.05, 0.3, 0.5, 1.0)


@dataclass
class EvalResult:
    map50: float
    per_class_ap: list[float]        # nan for classes with no ground truth
    recall_at_fpi: dict[float, float]
    f1: float
    auc: float | None                # None when one image class is absent

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "per_class_ap": self.per_class_ap,
            "recall_at_fpi": {repr(k): v for k, v in self.recall_at_fpi.items()},
            "f1": self.f1,
            "auc": self.auc,
        }


def _sorted_rows(dets_by_img, class_id=None):
    """Flatten detections into (score, img, idx, box, cls) rows in match order."""
    rows = []
    for img, dets in enumerate(dets_by_img):
        for idx, (box, cls, score) in enumerate(dets):
            if class_id is None or cls == class_id:
                rows.append((score, img, idx, box, cls))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    return rows


def _match_rows(rows, gts_by_img, iou_threshold):
    """Greedy matching over pre-sorted rows; returns a tp flag per row."""
    taken = [set() for _ in gts_by_img]
    flags = []
    for _, img, _, box, cls in rows:
        best_iou = 0.0
        best_gt = -1
        for g, (gt_box, gt_cls) in enumerate(gts_by_img[img]):
            if gt_cls != cls or g in taken[img]:
                continue
            overlap = iou(box, gt_box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_gt = g
        if best_gt >= 0:
            taken[img].add(best_gt)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_counts(tp_cum, fp_cum, npos):
    """Exact area under the interpolated precision-recall curve."""
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def map_at_iou(dets_by_img, gts_by_img, iou_threshold: float = 0.5) -> tuple[float, list[float]]:
    """Mean AP over classes that have at least one ground-truth instance."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    num_classes = 0
    for gts in gts_by_img:
        for _, cls in gts:
            num_classes = max(num_classes, cls + 1)
    for dets in dets_by_img:
        for _, cls, _ in dets:
            num_classes = max(num_classes, cls + 1)

    per_class = []
    for cls in range(num_classes):
        npos = sum(1 for gts in gts_by_img for _, c in gts if c == cls)
        if npos == 0:
            per_class.append(float("nan"))
            continue
        rows = _sorted_rows(dets_by_img, cls)
        flags = _match_rows(rows, gts_by_img, iou_threshold)
        if not rows:
            per_class.append(0.0)
            continue
        tp_cum = np.cumsum([1.0 if f else 0.0 for f in flags])
        fp_cum = np.cumsum([0.0 if f else 1.0 for f in flags])
        per_class.append(_ap_from_counts(tp_cum, fp_cum, npos))
    valid = [ap for ap in per_class if not np.isnan(ap)]
    return (float(np.mean(valid)) if valid else 0.0), per_class


def _sweep_points(dets_by_img, gts_by_img, iou_threshold):
    """(fp, tp) after each score-threshold block of the ranked detection list."""
    rows = _sorted_rows(dets_by_img)
    flags = _match_rows(rows, gts_by_img, iou_threshold)
    points = [(0, 0)]
    tp = fp = 0
    for i, flag in enumerate(flags):
        tp, fp = tp + flag, fp + (not flag)
        last_of_block = i + 1 == len(rows) or rows[i + 1][0] != rows[i][0]
        if last_of_block:
            points.append((fp, tp))
    return points


def froc(dets_by_img, gts_by_img, fpi_points=FPI_POINTS, iou_threshold: float = 0.5) -> dict[float, float]:
    """Best recall achievable at each false-positives-per-image budget.

    The score threshold sweeps over the distinct detection scores; recall at a
    budget is the maximum over thresholds whose FPI stays within it (step-wise,
    no interpolation between thresholds).
    """
    num_images = len(gts_by_img)
    npos = sum(len(gts) for gts in gts_by_img)
    points = _sweep_points(dets_by_img, gts_by_img, iou_threshold)
    out = {}
    for budget in fpi_points:
        best = 0.0
        for fp, tp in points:
            if num_images and fp / num_images <= budget and npos:
                best = max(best, tp / npos)
        out[budget] = best
    return out


def f1_auc(dets_by_img, gts_by_img, iou_threshold: float = 0.5) -> tuple[float, float | None]:
    """F1 at the best score threshold, and image-level ROC AUC.

    An image is positive when it contains any ground-truth object; its score is
    the maximum detection score (0 with no detections). AUC is undefined when
    every image has the same polarity and comes back as None.
    """
    npos = sum(len(gts) for gts in gts_by_img)
    best_f1 = 0.0
    for fp, tp in _sweep_points(dets_by_img, gts_by_img, iou_threshold):
        fn = npos - tp
        denom = 2 * tp + fp + fn
        if denom > 0:
            best_f1 = max(best_f1, 2 * tp / denom)

    labels = np.array([1.0 if gts else 0.0 for gts in gts_by_img])
    scores = np.array([
        max((score for _, _, score in dets), default=0.0) for dets in dets_by_img
    ])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return best_f1, None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank for ties
        i = j + 1
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return best_f1, float(auc)


def detections_for_eval(params: ModelParams, sample: DetectionSample) -> list[tuple[BBox, int, float]]:
    """One scored detection per proposal (foreground argmax), no thresholding."""
    return [(det.box, det.class_id, det.score) for det in forward(params, sample)]


def ground_truth_of(sample: DetectionSample) -> list[tuple[BBox, int]]:
    return [(obj.box, obj.class_id) for obj in sample.objects]


def evaluate(params: ModelParams, samples: list[DetectionSample],
             iou_threshold: float = 0.5, fpi_points=FPI_POINTS,
             num_classes: int | None = None) -> EvalResult:
    """Full metric sweep of a model over a labeled dataset."""
    dets = [detections_for_eval(params, s) for s in samples]
    gts = [ground_truth_of(s) for s in samples]
    map50, per_class = map_at_iou(dets, gts, iou_threshold)
    if num_classes is None:
        num_classes = params.num_classes
    while len(per_class) < num_classes:
        per_class.append(float("nan"))
    recalls = froc(dets, gts, fpi_points, iou_threshold)
    f1, auc = f1_auc(dets, gts, iou_threshold)
    return EvalResult(map50, per_class[:num_classes], recalls, f1, auc)
