"""Full adaptation pipeline: source pretraining, then source-free mean-teacher
self-training with relation-guided augmentation, relation-weighted losses,
expert supervision and a subset discriminator.

The teacher only ever moves by EMA; gradients touch the student and the
discriminator. All randomness flows from the single config seed through named
sub-streams, so a run is a pure function of its config.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .config import AdaptationConfig
from .cropbank import SIMILAR, AugmentPolicy, CropEntry, Cropbank, augment_sample
from .detector import (GradientSet, ModelParams, TrainingError, detection_loss,
                       forward, match_labels, sgd_step)
from .expert import expert_loss, expert_predict
from .metrics import evaluate
from .partition import VarianceReport, partition
from .relation import RelationMatrix, batch_confusion
from .teacher import background_indices, ema_update, pseudo_label
from .util import derive_seed, one_hot, rng_stream
from .weighting import relation_weights
from .world import DetectionSample, DomainSpec, generate_domain, perturb_features


class SourceAccessError(RuntimeError):
    """Raised when sealed source data is touched during adaptation."""


class SealedDataset:
    """List-like dataset handle that can be permanently revoked.

    Source data is wrapped in one of these and sealed once pretraining ends;
    any later access is a contract violation, not a silent read.
    """

    def __init__(self, samples: list[DetectionSample]):
        self._samples = samples
        self._sealed = False

    def seal(self) -> None:
        self._sealed = True

    @property
    def sealed(self) -> bool:
        return self._sealed

    def _check(self) -> None:
        if self._sealed:
            raise SourceAccessError("source dataset was sealed after pretraining")

    def __len__(self) -> int:
        self._check()
        return len(self._samples)

    def __getitem__(self, index):
        self._check()
        return self._samples[index]

    def __iter__(self):
        self._check()
        return iter(list(self._samples))


@dataclass
class DiscriminatorParams:
    """Linear logistic probe over feature vectors."""

    w: np.ndarray
    b: float = 0.0

    @classmethod
    def zeros(cls, feature_dim: int) -> "DiscriminatorParams":
        return cls(np.zeros(feature_dim), 0.0)


def discriminator_loss(disc: DiscriminatorParams, features: np.ndarray, subset_tags):
    """Logistic subset-prediction loss with gradient-reversal outputs.

    Returns (loss, (dw, db), reversed_feature_grads). The feature gradients are
    sign-flipped so an upstream feature producer trained with them becomes
    subset-invariant. Batches containing a single subset are skipped (zero loss
    and gradients). Tags may be subset strings or 0/1 labels.
    """
    feats = np.asarray(features, dtype=float).reshape(len(subset_tags), -1)
    y = np.array([1.0 if t in (SIMILAR, 1, 1.0, True) else 0.0 for t in subset_tags])
    zeros = (np.zeros_like(disc.w), 0.0)
    if len(y) == 0 or y.min() == y.max():
        return 0.0, zeros, np.zeros_like(feats)
    z = feats @ disc.w + disc.b
    # softplus(z) - y*z is the stable form of -[y log p + (1-y) log(1-p)]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    p = 1.0 / (1.0 + np.exp(-z))
    dz = (p - y) / len(y)
    grad_w = feats.T @ dz
    grad_b = float(dz.sum())
    reversed_feats = -np.outer(dz, disc.w)
    return loss, (grad_w, grad_b), reversed_feats


def decay_lambda_d(initial: float, epoch: int, total_epochs: int) -> float:
    """Linear decay from `initial` at epoch 0 to 0 at `total_epochs`."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs]")
    return initial * (1.0 - epoch / total_epochs)


@dataclass
class EpochRecord:
    epoch: int
    student_map: float
    teacher_map: float
    per_class_ap: list[float]  # teacher's, nan where the class has no eval GT
    loss_stu: float
    loss_expert: float
    loss_dis: float
    lambda_d: float
    relation_snapshot: list[list[float]] = field(repr=False, default_factory=list)


@dataclass
class TrainHistory:
    num_classes: int
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        header = ["epoch", "student_map", "teacher_map"]
        header += [f"ap_class_{c}" for c in range(self.num_classes)]
        header += ["loss_stu", "loss_expert", "loss_dis", "lambda_d"]
        writer.writerow(header)
        for r in self.records:
            row = [r.epoch, repr(r.student_map), repr(r.teacher_map)]
            row += [repr(float(ap)) for ap in r.per_class_ap]
            row += [repr(r.loss_stu), repr(r.loss_expert), repr(r.loss_dis), repr(r.lambda_d)]
            writer.writerow(row)
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    def teacher_curve(self) -> list[float]:
        return [r.teacher_map for r in self.records]

    def final_teacher_map(self) -> float:
        return self.records[-1].teacher_map if self.records else float("nan")


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def pretrain_source(config: AdaptationConfig) -> tuple[ModelParams, SealedDataset]:
    """Supervised training on freshly generated source data, then seal it.

    With pretrain_epochs=0 the randomly initialized model is returned as-is.
    The sealed handle is returned so callers can prove the source stays closed.
    """
    config.validate()
    source_data = generate_domain(config.source, derive_seed(config.seed, "world", "source"))
    params = ModelParams.init(config.num_classes, config.source.feature_dim,
                              rng_stream(config.seed, "init"),
                              dropout_rate=config.dropout_rate)
    shuffle_rng = rng_stream(config.seed, "pretrain-shuffle")
    for epoch in range(config.pretrain_epochs):
        order = shuffle_rng.permutation(len(source_data))
        for batch in _batches(order, config.batch_size):
            total = GradientSet.zeros_like(params)
            for idx in batch:
                sample = source_data[int(idx)]
                labels = [(obj.box, one_hot(obj.class_id, config.num_classes))
                          for obj in sample.objects]
                loss, grads = detection_loss(params, sample, labels)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite pretrain loss at epoch {epoch}")
                total = total + grads
            params = sgd_step(params, total.scaled(1.0 / len(batch)), config.learning_rate)
    sealed = SealedDataset(source_data)
    sealed.seal()
    return params, sealed


def _student_view(sample, labels, relation, split, bank, policy, subset, aug_rng,
                  noise_rng, config):
    """Augment (when enabled and ready) and add strong-view feature noise."""
    if config.enable_sa and split is not None:
        sample, labels = augment_sample(sample, labels, relation, split, bank,
                                        policy, subset, aug_rng)
    if config.noise_scale > 0:
        sample = perturb_features(sample, config.noise_scale, noise_rng)
    return sample, labels


def adapt(
    source_params: ModelParams,
    target_data: list[DetectionSample],
    config: AdaptationConfig,
    out_dir: str | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Source-free adaptation; returns the final teacher and the epoch history.

    Per batch: teacher pseudo-labels each clean sample, the student trains on
    the augmented noisy view with relation-derived instance weights plus expert
    supervision, the discriminator trains on subset tags, the teacher follows
    by EMA, and the relation matrix and crop banks absorb the batch statistics.
    """
    config.validate()
    num_classes = config.num_classes
    report = partition(target_data, source_params, config.mc_passes,
                       config.variance_threshold, rng_stream(config.seed, "partition"))
    by_id = {s.id: s for s in target_data}

    student = source_params.copy()
    teacher = source_params.copy()
    relation = RelationMatrix.identity(num_classes, config.relation_ema)
    bank = Cropbank(config.bank_capacity)
    policy = AugmentPolicy(config.p_aug, config.mix_ratio)
    disc = DiscriminatorParams.zeros(config.source.feature_dim)

    eval_spec = dataclasses.replace(config.target, size=config.eval_size)
    eval_data = generate_domain(eval_spec, derive_seed(config.seed, "world", "eval"))

    history = TrainHistory(num_classes)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report.save_csv(os.path.join(out_dir, "partition.csv"))

    ids = sorted(by_id)
    for epoch in range(config.epochs):
        lambda_d = decay_lambda_d(config.disc_weight, epoch, config.epochs) \
            if config.decay_disc else config.disc_weight
        lambda_u = decay_lambda_d(config.unsup_weight, epoch, config.epochs) \
            if config.decay_unsup else config.unsup_weight
        shuffle_rng = rng_stream(config.seed, "shuffle", epoch)
        aug_rng = rng_stream(config.seed, "augment", epoch)
        noise_rng = rng_stream(config.seed, "noise", epoch)

        stu_losses, expert_losses, dis_losses = [], [], []
        order = shuffle_rng.permutation(len(ids))
        for batch in _batches(order, config.batch_size):
            split = relation.split() if relation.ready else None
            total = GradientSet.zeros_like(student)
            batch_pairs = []
            disc_feats, disc_tags = [], []
            for pos in batch:
                sample = by_id[ids[int(pos)]]
                subset = report.subset_of(sample.id)
                pseudo = pseudo_label(teacher, sample, config.conf_threshold)
                labels = [(p.box, p.class_vec) for p in pseudo]
                strong, labels = _student_view(sample, labels, relation, split, bank,
                                               policy, subset, aug_rng, noise_rng, config)

                pairs = []
                if labels:
                    dets = forward(student, strong)
                    matches = match_labels(
                        strong.proposal_boxes,
                        np.array([box.as_array() for box, _ in labels]))
                    pairs = [(int(np.argmax(vec)), dets[int(j)].class_id)
                             for (_, vec), j in zip(labels, matches)]
                weights = relation_weights(relation, pairs, config.weight_reg) \
                    if (config.enable_sal and pairs) else None

                bg = None if config.background_bar is None else \
                    background_indices(teacher, sample, config.background_bar)
                loss_stu, g_stu = detection_loss(student, strong, labels, weights,
                                                 background=bg)
                total = total + g_stu.scaled(lambda_u)
                stu_losses.append(loss_stu)
                batch_pairs.extend(pairs)

                if config.enable_expert:
                    expert_rng = rng_stream(config.seed, "expert", epoch, sample.id)
                    elabels = expert_predict(config.expert, sample, expert_rng, num_classes)
                    eweights = None
                    if config.enable_sal and elabels:
                        dets = forward(student, strong)
                        ematches = match_labels(
                            strong.proposal_boxes,
                            np.array([lab.box.as_array() for lab in elabels]))
                        epairs = [(int(np.argmax(lab.class_vec)), dets[int(j)].class_id)
                                  for lab, j in zip(elabels, ematches)]
                        eweights = relation_weights(relation, epairs, config.weight_reg)
                    loss_exp, g_exp = expert_loss(student, strong, elabels,
                                                  config.expert_cls_weight,
                                                  config.expert_reg_weight, eweights)
                    total = total + g_exp
                    expert_losses.append(loss_exp)

                if config.enable_dis:
                    disc_feats.append(strong.proposal_features)
                    disc_tags.extend([subset] * strong.num_proposals)

                # bank absorbs the clean features of confident instances
                for p in pseudo:
                    entry = CropEntry(sample.proposal_features[p.proposal_index].copy(),
                                      p.class_vec, (p.box.width, p.box.height))
                    bank.push(subset, int(np.argmax(p.class_vec)), entry)

            if not total.is_finite():
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            student = sgd_step(student, total.scaled(1.0 / len(batch)), config.learning_rate)
            teacher = ema_update(teacher, student, config.teacher_ema)
            if batch_pairs:
                relation.update(batch_confusion(batch_pairs, num_classes))
            if config.enable_dis and disc_feats:
                # reversed feature grads stop here: the detector is linear in
                # the raw input features, so there is no trunk to align
                loss_dis, (gw, gb), _ = discriminator_loss(
                    disc, np.concatenate(disc_feats, axis=0), disc_tags)
                disc = DiscriminatorParams(disc.w - config.learning_rate * gw,
                                           disc.b - config.learning_rate * gb)
                dis_losses.append(loss_dis)

        teacher_eval = evaluate(teacher, eval_data, num_classes=num_classes)
        student_eval = evaluate(student, eval_data, num_classes=num_classes)
        record = EpochRecord(
            epoch=epoch,
            student_map=student_eval.map50,
            teacher_map=teacher_eval.map50,
            per_class_ap=teacher_eval.per_class_ap,
            loss_stu=float(np.mean(stu_losses)) if stu_losses else 0.0,
            loss_expert=float(np.mean(expert_losses)) if expert_losses else 0.0,
            loss_dis=float(np.mean(dis_losses)) if dis_losses else 0.0,
            lambda_d=lambda_d,
            relation_snapshot=relation.matrix.tolist(),
        )
        history.records.append(record)
        if out_dir:
            from .detector import save_params
            save_params(os.path.join(out_dir, f"epoch_{epoch:03d}_teacher.json"), teacher)
            relation.save_rows(os.path.join(out_dir, f"epoch_{epoch:03d}_relation.json"))

    return teacher, history


def ablation_variants(config: AdaptationConfig) -> dict[str, AdaptationConfig]:
    """Base (plain mean teacher + discriminator), +SA, +SAL and the full pipeline."""
    base = dataclasses.replace(config, enable_sa=False, enable_sal=False,
                               enable_expert=False, enable_dis=True)
    return {
        "base": base,
        "sa": dataclasses.replace(base, enable_sa=True),
        "sal": dataclasses.replace(base, enable_sal=True),
        "full": dataclasses.replace(base, enable_sa=True, enable_sal=True,
                                    enable_expert=True),
    }


def run_adaptation(config: AdaptationConfig, out_dir: str | None = None):
    """Pretrain, seal the source, adapt; returns (source params, teacher, history)."""
    source_params, _ = pretrain_source(config)
    target_data = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    teacher, history = adapt(source_params, target_data, config, out_dir)
    return source_params, teacher, history
