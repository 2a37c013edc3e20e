"""Run configuration: every knob of the adaptation pipeline in one dataclass."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .expert import ExpertSpec
from .world import ConfigError, DomainSpec, make_domain_spec, shift_domain

DEFAULT_FREQUENCY = (0.35, 0.25, 0.20, 0.15, 0.05)


@dataclass
class AdaptationConfig:
    """All hyperparameters of the pipeline, with working desk-scale defaults."""

    source: DomainSpec
    target: DomainSpec
    expert: ExpertSpec = field(default_factory=ExpertSpec)
    seed: int = 0

    # mean-teacher loop; thresholds and rates were calibrated by pilot runs on
    # the default world (slower EMA freezes the teacher at desk scale, and a
    # 0.8 gate starves the minority-class statistics)
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 0.05     # student (and discriminator) SGD step
    conf_threshold: float = 0.7     # pseudo-label confidence gate
    teacher_ema: float = 0.99       # weight kept on the old teacher
    background_bar: float | None = 0.1  # below this the teacher calls background
    noise_scale: float = 0.4        # strong-view feature noise for the student
    pretrain_epochs: int = 25

    # relation matrix and loss weighting
    relation_ema: float = 0.99
    weight_reg: float = 0.5         # regularizer pulling instance weights to 1

    # relation-guided augmentation
    p_aug: float = 0.5
    mix_ratio: float = 0.7
    bank_capacity: int = 64

    # variance partitioning
    mc_passes: int = 10
    variance_threshold: float = 0.5
    dropout_rate: float = 0.3

    # combined objective
    unsup_weight: float = 1.0       # on the pseudo-label loss
    disc_weight: float = 0.1        # initial discriminator loss weight
    expert_cls_weight: float = 1.0
    expert_reg_weight: float = 1.0
    decay_disc: bool = True         # linearly decay the discriminator weight
    decay_unsup: bool = False       # alternative schedule, off by default

    # ablation switches
    enable_sa: bool = True
    enable_sal: bool = True
    enable_expert: bool = True
    enable_dis: bool = True

    eval_size: int = 200

    def validate(self) -> None:
        self.source.validate()
        self.target.validate()
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 < self.conf_threshold <= 1.0:
            raise ConfigError("conf_threshold must lie in (0, 1]")
        if not 0.0 <= self.teacher_ema <= 1.0 or not 0.0 <= self.relation_ema <= 1.0:
            raise ConfigError("EMA rates must lie in [0, 1]")
        if self.background_bar is not None and not 0.0 <= self.background_bar < 1.0:
            raise ConfigError("background_bar must lie in [0, 1) or be null")
        if not 0.0 <= self.p_aug <= 1.0 or not 0.0 < self.mix_ratio <= 1.0:
            raise ConfigError("p_aug in [0, 1], mix_ratio in (0, 1]")
        if self.weight_reg < 0 or self.bank_capacity < 1:
            raise ConfigError("weight_reg >= 0 and bank_capacity >= 1 required")
        if self.mc_passes < 2 or not 0.0 < self.variance_threshold < 1.0:
            raise ConfigError("mc_passes >= 2 and variance_threshold in (0, 1) required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        for name in ("unsup_weight", "disc_weight", "expert_cls_weight",
                     "expert_reg_weight", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.eval_size < 1:
            raise ConfigError("eval_size must be >= 1")
        if self.source.num_classes != self.target.num_classes:
            raise ConfigError("source and target must share the class set")
        if self.source.feature_dim != self.target.feature_dim:
            raise ConfigError("source and target must share the feature dimension")

    @property
    def num_classes(self) -> int:
        return self.source.num_classes

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (DomainSpec, ExpertSpec)):
                value = value.to_dict()
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationConfig":
        """Build from a (possibly partial) plain dict; omitted fields keep defaults."""
        base = default_config(seed=int(data.get("seed", 0))).to_dict()
        unknown = set(data) - set(base)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for key, value in data.items():
            if key in ("source", "target", "expert") and isinstance(value, dict):
                merged = dict(base[key])
                extra = set(value) - set(merged)
                if extra:
                    raise ConfigError(f"unknown {key} fields: {sorted(extra)}")
                merged.update(value)
                base[key] = merged
            else:
                base[key] = value
        kwargs = dict(base)
        kwargs["source"] = DomainSpec.from_dict(kwargs["source"])
        kwargs["target"] = DomainSpec.from_dict(kwargs["target"])
        kwargs["expert"] = ExpertSpec.from_dict(kwargs["expert"])
        config = cls(**kwargs)
        config.validate()
        return config

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load_json(cls, path) -> "AdaptationConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def shift_vector(feature_dim: int, magnitude: float, direction_seed: int = 11) -> np.ndarray:
    """Deterministic unit direction scaled to `magnitude`."""
    rng = np.random.default_rng(direction_seed)
    v = rng.standard_normal(feature_dim)
    return magnitude * v / np.linalg.norm(v)


def biased_target_spec(source: DomainSpec, shift_magnitude: float,
                       contraction: float, anchor_class: int = 0) -> DomainSpec:
    """Target spec with a covariate shift plus class-context bias.

    Every feature center moves by a common shift vector; on top of that the
    centers of rare classes (frequency below the uniform share) are pulled
    `contraction` of the way toward the dominant anchor class. Rare classes
    therefore get systematically mistaken for the anchor on the target domain,
    which is the bias self-training amplifies.
    """
    if not 0.0 <= contraction < 1.0:
        raise ConfigError("contraction must lie in [0, 1)")
    spec = shift_domain(source, shift_vector(source.feature_dim, shift_magnitude))
    means = spec.class_means.copy()
    fair_share = 1.0 / source.num_classes
    for c in range(source.num_classes):
        if source.frequency[c] < fair_share:
            means[c] = means[c] + contraction * (means[anchor_class] - means[c])
    return dataclasses.replace(spec, class_means=means)


def default_config(seed: int = 0, shift_magnitude: float = 2.0,
                   contraction: float = 0.35) -> AdaptationConfig:
    """The default imbalanced, shifted world (C=5, D=16, N=500 per domain)."""
    source = make_domain_spec(
        num_classes=5, feature_dim=16, size=500,
        frequency=DEFAULT_FREQUENCY, separation=4.0, layout_seed=7,
    )
    target = biased_target_spec(source, shift_magnitude, contraction)
    return AdaptationConfig(source=source, target=target, seed=seed)
