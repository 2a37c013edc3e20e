"""detadapt: source-free adaptation of a toy detector on a synthetic proposal world.

A mean-teacher self-training pipeline hardened against class-context bias and
mode collapse: an EMA-smoothed class-relation matrix drives instance-level loss
reweighting and relation-guided MixUp from FIFO crop banks, a dropout-variance
split separates source-similar from dissimilar target samples, and a simulated
frozen expert supplies auxiliary pseudo-supervision.
"""

from .config import AdaptationConfig, default_config
from .cropbank import (DISSIMILAR, SIMILAR, AugmentPolicy, CropEntry, Cropbank,
                       augment_sample, mixup, sample_pair)
from .detector import (Detection, GradientSet, ModelParams, TrainingError,
                       detection_loss, forward, giou, load_params, save_params,
                       sgd_step)
from .expert import ExpertLabel, ExpertSpec, expert_loss, expert_predict
from .metrics import EvalResult, evaluate, f1_auc, froc, map_at_iou
from .partition import VarianceReport, box_variance, cls_variance, mc_passes, partition
from .relation import ClassSplit, NotReadyError, RelationMatrix, batch_confusion
from .teacher import PseudoLabel, TeacherState, ema_update, pseudo_label, student_step
from .trainer import (DiscriminatorParams, SealedDataset, SourceAccessError,
                      TrainHistory, ablation_variants, adapt, decay_lambda_d,
                      discriminator_loss, pretrain_source, run_adaptation)
from .weighting import (DegenerateBatchError, instance_weight, normalize_foreground,
                        regularize, relation_weights, weighted_ce)
from .world import (BBox, ConfigError, DetectionSample, DomainSpec, ObjectInstance,
                    generate_domain, iou, load_dataset, make_domain_spec,
                    save_dataset, shift_domain)

__version__ = "0.1.0"
