import dataclasses

import numpy as np
import pytest

from detadapt.config import AdaptationConfig, default_config
from detadapt.cropbank import DISSIMILAR, SIMILAR
from detadapt.detector import ModelParams
from detadapt.metrics import evaluate
from detadapt.trainer import (DiscriminatorParams, SealedDataset,
                              SourceAccessError, ablation_variants, adapt,
                              decay_lambda_d, discriminator_loss,
                              pretrain_source)
from detadapt.util import derive_seed, rng_stream
from detadapt.world import generate_domain, make_domain_spec


def tiny_config(seed=0, **overrides):
    config = default_config(seed=seed)
    config.source = dataclasses.replace(config.source, size=60)
    config.target = dataclasses.replace(config.target, size=50)
    config.pretrain_epochs = overrides.pop("pretrain_epochs", 6)
    config.epochs = overrides.pop("epochs", 3)
    config.eval_size = overrides.pop("eval_size", 60)
    config.mc_passes = overrides.pop("mc_passes", 3)
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def test_discriminator_chance_loss_at_zero_params():
    rng = np.random.default_rng(0)
    disc = DiscriminatorParams.zeros(4)
    feats = rng.standard_normal((20, 4))
    tags = [SIMILAR] * 10 + [DISSIMILAR] * 10
    loss, _, _ = discriminator_loss(disc, feats, tags)
    assert loss == pytest.approx(np.log(2))


def test_discriminator_skips_single_subset_batches():
    disc = DiscriminatorParams(np.ones(3), 0.5)
    feats = np.ones((5, 3))
    loss, (gw, gb), rev = discriminator_loss(disc, feats, [SIMILAR] * 5)
    assert loss == 0.0
    assert np.all(gw == 0.0) and gb == 0.0 and np.all(rev == 0.0)


def test_discriminator_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    disc = DiscriminatorParams(rng.standard_normal(4), 0.3)
    feats = rng.standard_normal((12, 4))
    tags = [SIMILAR if i % 2 else DISSIMILAR for i in range(12)]
    loss, (gw, gb), rev = discriminator_loss(disc, feats, tags)
    h = 1e-6
    for i in range(4):
        disc.w[i] += h
        up, _, _ = discriminator_loss(disc, feats, tags)
        disc.w[i] -= 2 * h
        down, _, _ = discriminator_loss(disc, feats, tags)
        disc.w[i] += h
        assert gw[i] == pytest.approx((up - down) / (2 * h), abs=1e-6)
    # reversed feature gradients are the negated input-side derivatives
    for (r, c) in [(0, 0), (3, 2), (11, 3)]:
        feats[r, c] += h
        up, _, _ = discriminator_loss(disc, feats, tags)
        feats[r, c] -= 2 * h
        down, _, _ = discriminator_loss(disc, feats, tags)
        feats[r, c] += h
        assert rev[r, c] == pytest.approx(-(up - down) / (2 * h), abs=1e-6)


def test_adversarial_reversal_collapses_probe_accuracy():
    # a toy trainable feature map T over separable inputs: the probe trains to
    # separate, T trains on reversed gradients; a freshly fitted probe on the
    # final features should be near chance
    rng = np.random.default_rng(2)
    n = 120
    x = np.concatenate([rng.normal(-2.0, 0.5, (n // 2, 2)),
                        rng.normal(2.0, 0.5, (n // 2, 2))])
    tags = [DISSIMILAR] * (n // 2) + [SIMILAR] * (n // 2)

    def probe_accuracy(feats):
        probe = DiscriminatorParams.zeros(2)
        for _ in range(300):
            _, (gw, gb), _ = discriminator_loss(probe, feats, tags)
            probe = DiscriminatorParams(probe.w - 0.5 * gw, probe.b - 0.5 * gb)
        pred = feats @ probe.w + probe.b > 0
        truth = np.array([t == SIMILAR for t in tags])
        return float(np.mean(pred == truth))

    transform = np.eye(2)
    assert probe_accuracy(x @ transform.T) >= 0.95
    disc = DiscriminatorParams.zeros(2)
    for _ in range(400):
        feats = x @ transform.T
        _, (gw, gb), reversed_grads = discriminator_loss(disc, feats, tags)
        disc = DiscriminatorParams(disc.w - 0.5 * gw, disc.b - 0.5 * gb)
        transform -= 0.5 * (reversed_grads.T @ x) / len(x)
    assert probe_accuracy(x @ transform.T) <= 0.75


def test_decay_schedule_values():
    assert decay_lambda_d(0.1, 0, 50) == pytest.approx(0.1)
    assert decay_lambda_d(0.1, 50, 50) == 0.0
    assert decay_lambda_d(1.0, 25, 50) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        decay_lambda_d(0.1, 51, 50)


def test_sealed_dataset_blocks_every_access():
    samples = generate_domain(make_domain_spec(
        num_classes=2, feature_dim=4, size=5, frequency=(0.5, 0.5)), 0)
    handle = SealedDataset(samples)
    assert len(handle) == 5
    handle.seal()
    with pytest.raises(SourceAccessError):
        len(handle)
    with pytest.raises(SourceAccessError):
        handle[0]
    with pytest.raises(SourceAccessError):
        list(handle)


def test_pretrain_returns_sealed_source():
    config = tiny_config(pretrain_epochs=1)
    _, sealed = pretrain_source(config)
    assert sealed.sealed
    with pytest.raises(SourceAccessError):
        sealed[0]


def test_zero_pretrain_epochs_returns_initial_params():
    config = tiny_config(pretrain_epochs=0)
    params, _ = pretrain_source(config)
    expected = ModelParams.init(config.num_classes, config.source.feature_dim,
                                rng_stream(config.seed, "init"),
                                dropout_rate=config.dropout_rate)
    assert np.array_equal(params.w_cls, expected.w_cls)


def test_pretraining_beats_random_init_on_source():
    config = tiny_config(pretrain_epochs=8)
    trained, _ = pretrain_source(config)
    random_params, _ = pretrain_source(dataclasses.replace(config, pretrain_epochs=0))
    eval_spec = dataclasses.replace(config.source, size=80)
    eval_data = generate_domain(eval_spec, 123)
    trained_map = evaluate(trained, eval_data, num_classes=config.num_classes).map50
    random_map = evaluate(random_params, eval_data, num_classes=config.num_classes).map50
    assert trained_map > random_map


def test_adapt_zero_epochs_returns_source_copy():
    config = tiny_config(epochs=0)
    params, _ = pretrain_source(config)
    target = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    teacher, history = adapt(params, target, config)
    assert np.array_equal(teacher.w_cls, params.w_cls)
    assert history.records == []


def test_all_loss_switches_off_leave_params_unchanged():
    config = tiny_config(epochs=2, unsup_weight=0.0, enable_sa=False,
                         enable_sal=False, enable_expert=False, enable_dis=False)
    params, _ = pretrain_source(config)
    target = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    teacher, history = adapt(params, target, config)
    assert np.array_equal(teacher.w_cls, params.w_cls)
    assert np.array_equal(teacher.w_reg, params.w_reg)
    assert len(history.records) == 2


def test_identical_config_reproduces_history_bitwise():
    config = tiny_config(epochs=2)
    params, _ = pretrain_source(config)
    target = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    _, first = adapt(params, target, config)
    _, second = adapt(params, target, config)
    assert first.to_csv_text() == second.to_csv_text()
    _, other = adapt(params, target, dataclasses.replace(config, seed=config.seed + 1))
    assert other.to_csv_text() != first.to_csv_text()


def test_frozen_teacher_under_unit_ema():
    config = tiny_config(epochs=2, teacher_ema=1.0)
    params, _ = pretrain_source(config)
    target = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    teacher, _ = adapt(params, target, config)
    assert np.array_equal(teacher.w_cls, params.w_cls)


def test_ablation_variants_switch_matrix():
    variants = ablation_variants(tiny_config())
    assert set(variants) == {"base", "sa", "sal", "full"}
    base = variants["base"]
    assert not base.enable_sa and not base.enable_sal and not base.enable_expert
    assert base.enable_dis
    assert variants["sa"].enable_sa and not variants["sa"].enable_sal
    assert variants["sal"].enable_sal and not variants["sal"].enable_sa
    full = variants["full"]
    assert full.enable_sa and full.enable_sal and full.enable_expert


def test_adapt_writes_checkpoints(tmp_path):
    config = tiny_config(epochs=2)
    params, _ = pretrain_source(config)
    target = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    adapt(params, target, config, out_dir=str(tmp_path))
    assert (tmp_path / "partition.csv").exists()
    assert (tmp_path / "epoch_000_teacher.json").exists()
    assert (tmp_path / "epoch_001_relation.json").exists()


def test_config_dict_roundtrip_and_unknown_fields():
    config = tiny_config()
    clone = AdaptationConfig.from_dict(config.to_dict())
    assert clone.to_dict() == config.to_dict()
    from detadapt.world import ConfigError
    with pytest.raises(ConfigError):
        AdaptationConfig.from_dict({"bogus_field": 1})
