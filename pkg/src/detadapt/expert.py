"""Simulated frozen expert: a parametric oracle standing in for a large
pretrained vision model, plus the supervision loss it induces on the student.

The oracle reads ground truth and corrupts it with configurable miss, flip and
jitter rates, so label fidelity is an experimental knob rather than a model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import (GradientSet, ModelParams, forward_arrays, match_labels,
                       smooth_l1, smooth_l1_grad)
from .util import one_hot
from .world import BBox, DetectionSample


@dataclass(frozen=True)
class ExpertSpec:
    miss_rate: float = 0.1
    flip_rate: float = 0.05
    box_jitter: float = 0.05
    score_confidence: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0 or not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError("miss_rate and flip_rate must lie in [0, 1]")
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be non-negative")
        if not 0.0 < self.score_confidence <= 1.0:
            raise ValueError("score_confidence must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"miss_rate": self.miss_rate, "flip_rate": self.flip_rate,
                "box_jitter": self.box_jitter, "score_confidence": self.score_confidence}

    @classmethod
    def from_dict(cls, data: dict) -> "ExpertSpec":
        return cls(**data)


@dataclass(frozen=True)
class ExpertLabel:
    box: BBox
    class_vec: np.ndarray  # one-hot over the C foreground classes
    confidence: float


def expert_predict(spec: ExpertSpec, sample: DetectionSample, rng: np.random.Generator,
                   num_classes: int) -> list[ExpertLabel]:
    """Corrupted ground truth: per object, maybe miss, maybe flip, always jitter."""
    labels = []
    for obj in sample.objects:
        if rng.random() < spec.miss_rate:
            continue
        class_id = obj.class_id
        if rng.random() < spec.flip_rate:
            others = [k for k in range(num_classes) if k != class_id]
            class_id = int(others[rng.integers(len(others))])
        scale = np.array([obj.box.width, obj.box.height, obj.box.width, obj.box.height])
        offsets = rng.uniform(-spec.box_jitter, spec.box_jitter, 4) * scale
        box = BBox.from_raw(*(obj.box.as_array() + offsets))
        labels.append(ExpertLabel(box, one_hot(class_id, num_classes), spec.score_confidence))
    return labels


def expert_loss(
    params: ModelParams,
    sample: DetectionSample,
    labels: list[ExpertLabel],
    cls_weight: float,
    reg_weight: float,
    weights=None,
    *,
    dropout_seed: int | None = None,
    delta: float = 1.0,
) -> tuple[float, GradientSet]:
    """cls_weight * weighted CE + reg_weight * smooth-L1, matched by max IoU.

    Only proposals matched to an expert label are supervised; the expert says
    nothing about the rest of the image, so there is no background term here.
    """
    if not labels:
        return 0.0, GradientSet.zeros_like(params)
    n = len(labels)
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise ValueError("weights must align with expert labels")

    h, log_scores, scores, refined = forward_arrays(params, sample, dropout_seed)
    num_fg = params.num_classes
    label_boxes = np.array([lab.box.as_array() for lab in labels])
    matches = match_labels(sample.proposal_boxes, label_boxes)

    d_logits = np.zeros_like(scores)
    d_refined = np.zeros_like(refined)
    loss_cls = 0.0
    loss_reg = 0.0
    for i, lab in enumerate(labels):
        j = int(matches[i])
        target = np.zeros(num_fg + 1)
        target[:num_fg] = lab.class_vec
        loss_cls += -float(weights[i]) * float(target @ log_scores[j])
        d_logits[j] += weights[i] * (scores[j] - target)
        diff = refined[j] - lab.box.as_array()
        loss_reg += float(smooth_l1(diff, delta).sum())
        d_refined[j] += smooth_l1_grad(diff, delta)
    loss_cls /= n
    loss_reg /= n
    d_logits *= cls_weight / n
    d_refined *= reg_weight / n

    loss = cls_weight * loss_cls + reg_weight * loss_reg
    grads = GradientSet(
        w_cls=d_logits.T @ h,
        b_cls=d_logits.sum(axis=0),
        w_reg=d_refined.T @ h,
        b_reg=d_refined.sum(axis=0),
        loss=loss,
    )
    return loss, grads
