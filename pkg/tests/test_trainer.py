import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from attnseg.checkpoints import save_checkpoint
from attnseg.config import AugmentParams, TrainConfig, UNetConfig
from attnseg.errors import ConfigError, UsageError
from attnseg.evalkit import dice
from attnseg.swin import new_swin
from attnseg.trainer import (
    EarlyStopping,
    InverseFrequencySampler,
    SliceDataset,
    augment,
    finetune_two_logit,
    focal_ce_loss,
    init_two_logit,
    split_train_val,
    train_classifier,
    train_unet,
)
from attnseg.unet import new_unet

SMALL_UNET = UNetConfig(hierarchies=2, base_channels=4)


def test_focal_loss_without_focusing_is_cross_entropy(rng):
    logits = torch.from_numpy(rng.normal(size=(6, 2)))
    target = torch.from_numpy(rng.integers(0, 2, size=6))
    assert float(focal_ce_loss(logits, target, gamma=0.0)) == pytest.approx(
        float(F.cross_entropy(logits, target)), abs=1e-9)

    flags = torch.from_numpy(rng.integers(0, 2, size=(6, 6)).astype(np.float64))
    multi = torch.from_numpy(rng.normal(size=(6, 6)))
    assert float(focal_ce_loss(multi, flags, gamma=0.0, mode="logistic")) == pytest.approx(
        float(F.binary_cross_entropy_with_logits(multi, flags)), abs=1e-9)


def test_focal_loss_example_and_clamp():
    logits = torch.zeros(1, 2, dtype=torch.float64)
    # p_t = 0.5, gamma = 2: (0.5)^2 * ln 2
    assert float(focal_ce_loss(logits, torch.tensor([0]), gamma=2.0)) == pytest.approx(0.25 * math.log(2))
    extreme = torch.tensor([[1000.0, -1000.0]], dtype=torch.float64)
    assert math.isfinite(float(focal_ce_loss(extreme, torch.tensor([1]), gamma=2.0)))
    with pytest.raises(UsageError):
        focal_ce_loss(torch.zeros(2, 3), torch.zeros(2, 2), mode="logistic")


def test_inverse_frequency_sampler_balances_classes():
    sampler = InverseFrequencySampler([0] * 90 + [1] * 10, seed=0)
    draws = sampler.draw(100_000, epoch=1)
    assert abs(np.mean(sampler.labels[draws]) - 0.5) < 0.01
    np.testing.assert_array_equal(draws[:50], sampler.draw(100_000, epoch=1)[:50])
    assert not np.array_equal(draws[:50], sampler.draw(100_000, epoch=2)[:50])
    with pytest.raises(ConfigError):
        InverseFrequencySampler([0, 0, 0])


def test_augment_identity_and_double_flip(rng):
    pixels = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    mask = (rng.uniform(size=(16, 16)) > 0.7).astype(np.uint8)

    same, (same_mask,) = augment(pixels, [mask], AugmentParams.disabled(), rng)
    np.testing.assert_array_equal(same, pixels)
    np.testing.assert_array_equal(same_mask, mask)

    flip = AugmentParams(flip_prob=1.0, rotation_range=0.0, noise_sigma=0.0)
    once, (once_mask,) = augment(pixels, [mask], flip, rng)
    np.testing.assert_array_equal(once_mask, mask[:, ::-1])
    twice, (twice_mask,) = augment(once, [once_mask], flip, rng)
    np.testing.assert_array_equal(twice, pixels)
    np.testing.assert_array_equal(twice_mask, mask)


def test_augment_rotates_image_and_mask_together():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[10:26, 34:50] = 1
    pixels = np.stack([mask.astype(np.float32)] * 3)
    params = AugmentParams(flip_prob=0.0, rotation_range=15.0, noise_sigma=0.0)
    for seed in range(5):
        out, (out_mask, none) = augment(pixels, [mask, None], params, np.random.default_rng(seed))
        assert none is None
        assert set(np.unique(out_mask)) <= {0, 1}
        assert dice(out[0] >= 0.5, out_mask) > 0.9


def test_augment_noise_stays_in_range(rng):
    params = AugmentParams(flip_prob=0.0, rotation_range=0.0, noise_sigma=0.5)
    out, _ = augment(np.full((3, 8, 8), 0.99, dtype=np.float32), [], params, rng)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_early_stopping_patience_one():
    model = torch.nn.Linear(2, 1)
    stopper = EarlyStopping(patience=1)
    assert not stopper.step(1, 1.0, model)
    with torch.no_grad():
        model.weight.fill_(3.0)
    assert not stopper.step(2, 0.5, model)
    with torch.no_grad():
        model.weight.fill_(-1.0)
    assert stopper.step(3, 0.7, model)
    stopper.restore(model)
    assert stopper.best_epoch == 2
    assert torch.all(model.weight == 3.0)
    with pytest.raises(ConfigError):
        EarlyStopping(patience=0)


def test_split_train_val_keeps_studies_apart(tiny_catalog):
    train, val = split_train_val(tiny_catalog, val_fraction=0.25, seed=0)
    assert set(train.studies()).isdisjoint(val.studies())
    assert sorted(train.ids + val.ids) == sorted(tiny_catalog.ids)
    assert len(val) > 0

    one_study = tiny_catalog.subset(next(iter(tiny_catalog.studies().values())))
    with pytest.raises(ConfigError):
        split_train_val(one_study)


def test_slice_dataset_targets(tiny_catalog):
    one = SliceDataset(tiny_catalog, 32, "binary_one_logit", 32)[0]
    assert tuple(one["pixels"].shape) == (3, 32, 32) and tuple(one["target"].shape) == (1,)
    assert tuple(SliceDataset(tiny_catalog, 32, "multi_label", 32)[0]["target"].shape) == (6,)
    assert SliceDataset(tiny_catalog, 32, "binary_two_logit", 32)[0]["target"].dtype == torch.long
    assert tuple(SliceDataset(tiny_catalog, 32, "unet", 4)[0]["target"].shape) == (1, 32, 32)


def _train_config(**overrides):
    values = dict(mode="binary_one_logit", learning_rate=1e-3, batch_size=4, max_epochs=1, seed=7)
    values.update(overrides)
    return TrainConfig(**values)


def test_tiny_training_is_deterministic(tmp_path, tiny_catalog, tiny_swin_config):
    train, val = split_train_val(tiny_catalog, seed=0)
    first = train_classifier(train, val, tiny_swin_config, _train_config(), history_path=tmp_path / "h.csv",
                             progress=False)
    second = train_classifier(train, val, tiny_swin_config, _train_config(), progress=False)
    assert first.model.config.num_classes == 1
    assert len(first.history) == 1 and first.best_epoch == 1
    for (name, a), (_, b) in zip(first.model.state_dict().items(), second.model.state_dict().items()):
        assert torch.equal(a, b), name
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,val_accuracy"


def test_multi_label_and_sampling_modes_train(tiny_catalog, tiny_swin_config):
    train, val = split_train_val(tiny_catalog, seed=0)
    multi = train_classifier(train, val, tiny_swin_config, _train_config(mode="multi_label"), progress=False)
    assert multi.model.config.num_classes == 6
    sampled = train_classifier(train, val, tiny_swin_config,
                               _train_config(imbalance="inverse_frequency_sampling"), progress=False)
    assert math.isfinite(sampled.history[0]["train_loss"])


def test_train_classifier_rejects_unet_mode(tiny_catalog, tiny_swin_config):
    with pytest.raises(UsageError):
        train_classifier(tiny_catalog, tiny_catalog, tiny_swin_config, _train_config(mode="unet"))


def test_zero_epoch_unet_keeps_its_initialisation(tiny_catalog):
    train, val = split_train_val(tiny_catalog, seed=0)
    config = TrainConfig.for_mode("unet", max_epochs=0, seed=3)
    result = train_unet(train, val, SMALL_UNET, config, side=32, progress=False)
    reference = new_unet(SMALL_UNET, seed=3)
    for name, tensor in reference.state_dict().items():
        assert torch.equal(result.model.state_dict()[name], tensor), name
    assert result.best_epoch is None and result.history == []


def test_unet_trains_one_epoch(tiny_catalog):
    train, val = split_train_val(tiny_catalog, seed=0)
    config = TrainConfig.for_mode("unet", learning_rate=1e-3, batch_size=4, max_epochs=1)
    result = train_unet(train, val, SMALL_UNET, config, side=32, progress=False)
    assert math.isfinite(result.best_val_loss)
    with pytest.raises(ConfigError):
        train_unet(train, val, SMALL_UNET, config, side=30, progress=False)


def test_two_logit_initialisation_copies_backbone(tmp_path, tiny_swin_config, tiny_catalog):
    base = new_swin(tiny_swin_config.model_copy(update={"num_classes": 1}), seed=5)
    path = save_checkpoint(base, tmp_path / "one.safetensors", train_mode="binary_one_logit")
    model = init_two_logit(path, seed=1)
    assert model.head.out_features == 2 and model.config.num_classes == 2
    base_state = base.state_dict()
    for name, tensor in model.state_dict().items():
        if not name.startswith("head."):
            assert torch.equal(tensor, base_state[name]), name

    train, val = split_train_val(tiny_catalog, seed=0)
    with pytest.raises(UsageError):
        finetune_two_logit(path, train, val, _train_config())
    tuned = finetune_two_logit(path, train, val, _train_config(mode="binary_two_logit",
                                                                imbalance="inverse_frequency_sampling"),
                               progress=False)
    assert tuned.model.config.num_classes == 2
