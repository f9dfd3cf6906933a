import csv

import numpy as np
import pytest

from mae3d import autodiff as ad
from mae3d.config import PretrainConfig
from mae3d.data import synth_dataset
from mae3d.geometry import normalize_unit_sphere
from mae3d.model import MAE3D
from mae3d.training import (METRIC_FIELDS, TrainingError, augment, evaluate_reconstruction, make_optimizer,
                            prepare_batch, pretrain, pretrain_step)

from conftest import tiny_pretrain_config


def _clouds(n=4, n_points=64, seed=0):
    return synth_dataset(["sphere", "cube"], n // 2, n_points, rng=seed)[0]


def test_augment_identity_without_rng():
    p = np.random.default_rng(0).normal(size=(10, 3))
    assert augment(p, None) is p


def test_augment_bounds():
    rng = np.random.default_rng(0)
    ones = np.ones((1, 3))
    zeros = np.zeros((1, 3))
    scales, shifts = [], []
    for _ in range(10_000):
        state = rng.bit_generator.state
        t = augment(zeros, rng)[0]
        rng.bit_generator.state = state
        s = augment(ones, rng)[0] - t
        scales.append(s)
        shifts.append(t)
    scales, shifts = np.array(scales), np.array(shifts)
    assert scales.min() >= 2 / 3 and scales.max() <= 1.5
    assert shifts.min() >= -0.2 and shifts.max() <= 0.2
    # both ends of each range are actually reached (10^4 uniform draws)
    assert scales.min() < 0.67 and scales.max() > 1.49
    assert shifts.min() < -0.199 and shifts.max() > 0.199


def test_augmented_cloud_renormalizes():
    p = normalize_unit_sphere(np.random.default_rng(0).normal(size=(50, 3)))
    q = normalize_unit_sphere(augment(p, np.random.default_rng(1)))
    assert np.isclose(np.linalg.norm(q, axis=1).max(), 1.0)


def test_prepare_batch_shapes(tiny_cfg):
    b = prepare_batch(_clouds(), tiny_cfg, np.random.default_rng(0))
    s, k = tiny_cfg.model.num_patches, tiny_cfg.model.patch_size
    assert b.points.shape == (4, 64, 3)
    assert b.local_patches.shape == (4, s, k, 3)
    assert b.visible.shape[1] + b.masked.shape[1] == s


def test_prepare_batch_rejects_wrong_point_count(tiny_cfg):
    with pytest.raises(ValueError, match="expected 64 points"):
        prepare_batch([np.zeros((10, 3))], tiny_cfg, np.random.default_rng(0))


def _first_step_loss(cfg):
    model = MAE3D(cfg.model, seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    batch = prepare_batch(_clouds(), cfg, np.random.default_rng([cfg.seed, 3, 0]), np.random.default_rng(1))
    return pretrain_step(model, opt, batch, cfg.alpha, cfg.base_lr), model


def test_first_step_bitwise_deterministic(tiny_cfg):
    (a, ma), (b, mb) = _first_step_loss(tiny_cfg), _first_step_loss(tiny_cfg)
    assert a.total == b.total
    for (n, p), (_, q) in zip(ma.named_parameters(), mb.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_total_is_center_plus_alpha_fine():
    res, _ = _first_step_loss(tiny_pretrain_config(alpha=0.25))
    assert res.total == pytest.approx(res.center + 0.25 * res.fine, rel=1e-6)


def test_single_cloud_overfit_loss_decreases():
    # fixed mask and no augmentation: the loss should fall steadily
    cfg = tiny_pretrain_config(base_lr=1e-3, augment=False)
    model = MAE3D(cfg.model, seed=0)
    opt = make_optimizer(model, cfg)
    batch = prepare_batch(_clouds(2)[:1], cfg, np.random.default_rng(0))
    losses = [pretrain_step(model, opt, batch, 1.0, cfg.base_lr).total for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_mask_ratio_zero_is_plain_autoencoder(tiny_cfg):
    cfg = tiny_pretrain_config(mask_ratio=0.0)
    batch = prepare_batch(_clouds(), cfg, np.random.default_rng(0))
    assert batch.masked.shape[1] == 0
    out = MAE3D(cfg.model, seed=0)(batch)
    assert out.mask_tokens is None


def test_pretrain_metrics_csv_deterministic(tmp_path):
    cfg = tiny_pretrain_config(epochs=2, batch_size=3)
    clouds = _clouds(4)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    res = pretrain(clouds, cfg, metrics_path=a)
    pretrain(clouds, cfg, metrics_path=b)
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(a.open()))
    assert tuple(rows[0]) == METRIC_FIELDS
    assert len(rows) == 4  # 2 epochs x ceil(4 / 3) steps
    assert float(rows[0]["lr"]) == cfg.base_lr
    assert len(res.epoch_means()) == 2
    assert all(np.isfinite(res.epoch_means()))


def test_masks_resampled_each_epoch(tiny_cfg):
    clouds = _clouds(2)
    m0 = prepare_batch(clouds, tiny_cfg, np.random.default_rng([1, 3, 0])).masked
    m1 = prepare_batch(clouds, tiny_cfg, np.random.default_rng([1, 3, 1])).masked
    assert not np.array_equal(m0, m1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_context():
    cfg = tiny_pretrain_config(epochs=1, batch_size=2)
    model = MAE3D(cfg.model, seed=0)
    model.reconstruction.center_head.layers[-1].bias.data[:] = np.inf
    with pytest.raises(TrainingError, match=r"non-finite loss .*epoch 0, batch 0, lr"):
        pretrain(_clouds(2), cfg, model=model)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_reported_with_context():
    cfg = tiny_pretrain_config(epochs=1, batch_size=2)
    model = MAE3D(cfg.model, seed=0)
    model.reconstruction.center_head.layers[-1].weight.data[:] = 1e38
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        pretrain(_clouds(2), cfg, model=model)


def test_evaluate_reconstruction_restores_train_mode(tiny_cfg):
    model = MAE3D(tiny_cfg.model, seed=0)
    out = evaluate_reconstruction(model, _clouds(), tiny_cfg)
    assert set(out) == {"cd_center", "cd_fine"} and all(v > 0 for v in out.values())
    assert model.training
    assert out == evaluate_reconstruction(model, _clouds(), tiny_cfg)


def test_config_validation():
    from mae3d.config import ConfigError
    with pytest.raises(ConfigError, match="mask_ratio"):
        PretrainConfig(mask_ratio=1.0).validate()
    with pytest.raises(ConfigError, match="mask_strategy"):
        PretrainConfig(mask_strategy="grid").validate()
    with pytest.raises(ConfigError, match="num_patches"):
        tiny_pretrain_config(n_points=8).validate()
    assert ad.cosine_lr(0, 10, 1e-3) == 1e-3


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="known gap: Chamfer-only center supervision stalls in a local minimum "
                                       "(center CD 2.8e-2 after 300 steps)")
def test_single_cloud_center_overfit():
    cfg = PretrainConfig(base_lr=1e-3, augment=False)
    model = MAE3D(cfg.model, seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    clouds, _ = synth_dataset(["sphere"], 1, cfg.n_points, rng=0)
    batch = prepare_batch(clouds, cfg, np.random.default_rng(0))
    for _ in range(300):
        res = pretrain_step(model, opt, batch, cfg.alpha, cfg.base_lr)
    print(f"center CD after 300 steps: {res.center:.4e}")
    assert res.center < 1e-3
