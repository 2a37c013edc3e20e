"""Synthetic detection world: proposal sets with feature vectors instead of pixels.

A "sample" is a fixed, ordered list of proposals (box + feature vector) plus the
ground-truth objects that generated some of them. Features are class-conditional
Gaussian draws, so class overlap and domain shift are fully controllable.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid domain or run configuration."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image units, corners (x1, y1) < (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_raw(cls, x1: float, y1: float, x2: float, y2: float, min_size: float = 1e-6) -> "BBox":
        """Build a valid box from arbitrary finite coordinates (reorders, pads)."""
        lo_x, hi_x = min(x1, x2), max(x1, x2)
        lo_y, hi_y = min(y1, y2), max(y1, y2)
        if hi_x - lo_x < min_size:
            hi_x = lo_x + min_size
        if hi_y - lo_y < min_size:
            hi_y = lo_y + min_size
        return cls(float(lo_x), float(lo_y), float(hi_x), float(hi_y))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n,4) and (m,4) corner-format box arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-12)


@dataclass(frozen=True)
class ObjectInstance:
    """A ground-truth object: box, class id and the feature vector of its region."""

    box: BBox
    class_id: int
    feature: np.ndarray


@dataclass
class DetectionSample:
    """One synthetic image: ordered proposals plus hidden ground truth.

    Proposal order is fixed at generation time and never changes, so proposal
    index j is a stable identity across forward passes.
    """

    id: int
    proposal_boxes: np.ndarray    # (P, 4)
    proposal_features: np.ndarray  # (P, D)
    objects: list[ObjectInstance]

    @property
    def num_proposals(self) -> int:
        return self.proposal_boxes.shape[0]

    @property
    def proposals(self) -> list[tuple[BBox, np.ndarray]]:
        return [
            (BBox(*self.proposal_boxes[j]), self.proposal_features[j])
            for j in range(self.num_proposals)
        ]

    def with_features(self, features: np.ndarray) -> "DetectionSample":
        """Copy of the sample with proposal features replaced (boxes shared)."""
        if features.shape != self.proposal_features.shape:
            raise ValueError("feature array shape mismatch")
        return DetectionSample(self.id, self.proposal_boxes, np.array(features), self.objects)


def perturb_features(sample: DetectionSample, scale: float, rng: np.random.Generator) -> DetectionSample:
    """Strong-view augmentation: additive Gaussian noise on every proposal feature."""
    if scale <= 0.0:
        return sample
    noise = scale * rng.standard_normal(sample.proposal_features.shape)
    return sample.with_features(sample.proposal_features + noise)


@dataclass
class DomainSpec:
    """Generative description of one domain.

    `class_means` rows are the per-class feature centers; `class_covs` are the
    isotropic std scales. `frequency` drives the class draw for each object.
    Background proposals draw from a dedicated Gaussian and carry no object.
    """

    num_classes: int
    feature_dim: int
    class_means: np.ndarray   # (C, D)
    class_covs: np.ndarray    # (C,)
    frequency: np.ndarray     # (C,), sums to 1
    background_rate: float    # expected background proposals per sample (Poisson)
    box_jitter: float         # proposal jitter as a fraction of box width/height
    size: int                 # number of samples
    image_size: float = 100.0
    min_box: float = 8.0
    max_box: float = 24.0
    min_objects: int = 1
    max_objects: int = 3
    background_mean: np.ndarray | None = None
    background_cov: float = 1.0
    min_proposal_iou: float = 0.5

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=float)
        self.class_covs = np.asarray(self.class_covs, dtype=float)
        self.frequency = np.asarray(self.frequency, dtype=float)
        if self.background_mean is None:
            self.background_mean = np.zeros(self.feature_dim)
        else:
            self.background_mean = np.asarray(self.background_mean, dtype=float)

    def validate(self) -> None:
        if self.num_classes < 1 or self.feature_dim < 1 or self.size < 0:
            raise ConfigError("num_classes, feature_dim must be >= 1 and size >= 0")
        if self.class_means.shape != (self.num_classes, self.feature_dim):
            raise ConfigError(f"class_means must be ({self.num_classes}, {self.feature_dim})")
        if self.class_covs.shape != (self.num_classes,) or np.any(self.class_covs <= 0):
            raise ConfigError("class_covs must be positive, one per class")
        if self.frequency.shape != (self.num_classes,) or np.any(self.frequency < 0):
            raise ConfigError("frequency must be non-negative, one per class")
        if abs(float(self.frequency.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"frequency must sum to 1, got {self.frequency.sum()}")
        if self.background_mean.shape != (self.feature_dim,):
            raise ConfigError("background_mean dimension mismatch")
        if self.background_cov <= 0 or self.background_rate < 0 or self.box_jitter < 0:
            raise ConfigError("background_cov must be > 0; rates must be >= 0")
        if not (0 < self.min_box <= self.max_box < self.image_size):
            raise ConfigError("box size range must fit inside the image")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigError("object count range invalid (at least one object per sample)")
        if not (0.0 < self.min_proposal_iou < 1.0):
            raise ConfigError("min_proposal_iou must lie in (0, 1)")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value = value.tolist()
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        return cls(**data)


def make_domain_spec(
    num_classes: int,
    feature_dim: int,
    size: int,
    frequency,
    separation: float = 4.0,
    layout_seed: int = 0,
    **overrides,
) -> DomainSpec:
    """Convenience constructor: class means on random unit directions scaled by `separation`."""
    rng = np.random.default_rng(layout_seed)
    dirs = rng.standard_normal((num_classes, feature_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    spec = DomainSpec(
        num_classes=num_classes,
        feature_dim=feature_dim,
        class_means=separation * dirs,
        class_covs=np.ones(num_classes),
        frequency=np.asarray(frequency, dtype=float),
        background_rate=overrides.pop("background_rate", 3.0),
        box_jitter=overrides.pop("box_jitter", 0.12),
        size=size,
        **overrides,
    )
    spec.validate()
    return spec


def shift_domain(base: DomainSpec, mean_shift, freq_override=None) -> DomainSpec:
    """New spec with every feature center displaced by `mean_shift` (and optionally new frequencies)."""
    shift = np.asarray(mean_shift, dtype=float)
    if shift.shape != (base.feature_dim,):
        raise ConfigError(f"mean_shift must have dimension {base.feature_dim}")
    spec = dataclasses.replace(
        base,
        class_means=base.class_means + shift[None, :],
        background_mean=base.background_mean + shift,
        frequency=np.asarray(freq_override, dtype=float) if freq_override is not None else base.frequency.copy(),
    )
    spec.validate()
    return spec


def _random_box(spec: DomainSpec, rng: np.random.Generator) -> BBox:
    w = rng.uniform(spec.min_box, spec.max_box)
    h = rng.uniform(spec.min_box, spec.max_box)
    x1 = rng.uniform(0.0, spec.image_size - w)
    y1 = rng.uniform(0.0, spec.image_size - h)
    return BBox(x1, y1, x1 + w, y1 + h)


def _jittered_proposal(box: BBox, spec: DomainSpec, rng: np.random.Generator) -> BBox:
    # Retry until the proposal keeps IoU above the detectability floor; the GT
    # box itself is the fallback, so the floor always holds.
    scale = np.array([box.width, box.height, box.width, box.height])
    for _ in range(20):
        offsets = rng.uniform(-spec.box_jitter, spec.box_jitter, 4) * scale
        x1, y1, x2, y2 = box.as_array() + offsets
        if x1 >= x2 or y1 >= y2:
            continue
        cand = BBox(x1, y1, x2, y2)
        if iou(cand, box) > spec.min_proposal_iou:
            return cand
    return box


def generate_domain(spec: DomainSpec, seed: int) -> list[DetectionSample]:
    """Draw a full dataset; a pure function of (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    samples = []
    for sample_id in range(spec.size):
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        classes = rng.choice(spec.num_classes, size=n_obj, p=spec.frequency)
        objects = []
        boxes = []
        feats = []
        for c in classes:
            c = int(c)
            box = _random_box(spec, rng)
            feature = spec.class_means[c] + spec.class_covs[c] * rng.standard_normal(spec.feature_dim)
            objects.append(ObjectInstance(box, c, feature))
            boxes.append(_jittered_proposal(box, spec, rng).as_array())
            feats.append(feature.copy())
        for _ in range(int(rng.poisson(spec.background_rate))):
            boxes.append(_random_box(spec, rng).as_array())
            feats.append(spec.background_mean + spec.background_cov * rng.standard_normal(spec.feature_dim))
        samples.append(
            DetectionSample(sample_id, np.array(boxes), np.array(feats), objects)
        )
    return samples


def dataset_to_dict(spec: DomainSpec, samples: list[DetectionSample]) -> dict:
    """JSON-ready dataset document with stable field order."""
    docs = []
    for s in samples:
        proposals = [
            [*map(float, s.proposal_boxes[j])] + [*map(float, s.proposal_features[j])]
            for j in range(s.num_proposals)
        ]
        objects = [[*map(float, o.box.as_array())] + [o.class_id] for o in s.objects]
        docs.append({"id": s.id, "proposals": proposals, "objects": objects})
    return {"spec": spec.to_dict(), "samples": docs}


def save_dataset(path, spec: DomainSpec, samples: list[DetectionSample]) -> None:
    with open(path, "w") as fh:
        json.dump(dataset_to_dict(spec, samples), fh)


def load_dataset(path) -> tuple[DomainSpec, list[DetectionSample]]:
    """Load a saved dataset.

    The on-disk object rows carry no feature vector; each object recovers the
    feature of its highest-IoU proposal (object proposals store the object
    feature verbatim at generation time, so this is exact for generated data).
    """
    with open(path) as fh:
        doc = json.load(fh)
    spec = DomainSpec.from_dict(doc["spec"])
    samples = []
    for rec in doc["samples"]:
        rows = np.array(rec["proposals"], dtype=float)
        boxes, feats = rows[:, :4], rows[:, 4:]
        objects = []
        for obj in rec["objects"]:
            box = BBox(*obj[:4])
            j = int(np.argmax(iou_matrix(box.as_array(), boxes)[0]))
            objects.append(ObjectInstance(box, int(obj[4]), feats[j].copy()))
        samples.append(DetectionSample(int(rec["id"]), boxes, feats, objects))
    return spec, samples
