"""Mean-teacher self-training: confidence-filtered pseudo-labels, EMA teacher."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .detector import ModelParams, detection_loss, forward, sgd_step
from .util import one_hot
from .world import BBox, DetectionSample, perturb_features


@dataclass(frozen=True)
class PseudoLabel:
    """A teacher prediction promoted to a training label."""

    box: BBox
    class_vec: np.ndarray  # one-hot over the C foreground classes
    confidence: float
    proposal_index: int


@dataclass
class TeacherState:
    teacher: ModelParams
    student: ModelParams
    ema_rate: float       # weight kept on the old teacher at each update
    conf_threshold: float

    def __post_init__(self):
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValueError("ema_rate must lie in [0, 1]")
        if not 0.0 < self.conf_threshold <= 1.0:
            raise ValueError("conf_threshold must lie in (0, 1]")


def pseudo_label(teacher: ModelParams, sample: DetectionSample, conf_threshold: float) -> list[PseudoLabel]:
    """Labels from proposals whose max foreground score reaches the threshold."""
    if not 0.0 < conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in (0, 1]")
    out = []
    for det in forward(teacher, sample):
        if det.score >= conf_threshold:
            out.append(PseudoLabel(det.box, one_hot(det.class_id, teacher.num_classes),
                                   det.score, det.proposal_index))
    return out


def ema_update(teacher: ModelParams, student: ModelParams, ema_rate: float) -> ModelParams:
    """Elementwise convex blend: rate 1 keeps the teacher, rate 0 copies the student."""
    if not 0.0 <= ema_rate <= 1.0:
        raise ValueError("ema_rate must lie in [0, 1]")
    if teacher.w_cls.shape != student.w_cls.shape or teacher.w_reg.shape != student.w_reg.shape:
        raise ValueError("teacher/student shape mismatch")
    blend = lambda t, s: ema_rate * t + (1.0 - ema_rate) * s
    return ModelParams(
        blend(teacher.w_cls, student.w_cls),
        blend(teacher.b_cls, student.b_cls),
        blend(teacher.w_reg, student.w_reg),
        blend(teacher.b_reg, student.b_reg),
        teacher.dropout_rate,
    )


def background_indices(teacher: ModelParams, sample: DetectionSample, bar: float) -> list[int]:
    """Proposals the teacher is confident are background (max fg score below bar).

    Proposals between the bar and the pseudo-label threshold stay unsupervised.
    """
    return [det.proposal_index for det in forward(teacher, sample) if det.score < bar]


def student_step(
    state: TeacherState,
    sample: DetectionSample,
    pseudo: list[PseudoLabel],
    weights,
    lr: float,
    *,
    background_bar: float | None = 0.1,
    noise_scale: float = 0.0,
    rng: np.random.Generator | None = None,
) -> TeacherState:
    """One SGD step of the student on pseudo-labels; the teacher is untouched.

    The student sees the strong view (feature noise of `noise_scale`); the
    teacher scored the clean sample. With no pseudo-labels and background
    supervision disabled the loss is empty and the student does not move.
    """
    strong = perturb_features(sample, noise_scale, rng) if noise_scale > 0 else sample
    labels = [(p.box, p.class_vec) for p in pseudo]
    bg = None if background_bar is None else background_indices(state.teacher, sample, background_bar)
    _, grads = detection_loss(state.student, strong, labels, weights, background=bg)
    return dataclasses.replace(state, student=sgd_step(state.student, grads, lr))
