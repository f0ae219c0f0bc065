import pytest
import torch

from attnseg.checkpoints import load_backbone, load_checkpoint, read_metadata, save_checkpoint
from attnseg.config import UNetConfig
from attnseg.errors import CheckpointError, DependencyError
from attnseg.swin import new_swin
from attnseg.unet import new_unet


def test_round_trip_restores_parameters_and_metadata(tmp_path, tiny_swin_config):
    model = new_swin(tiny_swin_config, seed=9)
    path = save_checkpoint(model, tmp_path / "ckpt" / "two.safetensors", train_mode="binary_two_logit",
                           extra={"best_epoch": 3})
    checkpoint = load_checkpoint(path, expect_kind="swin", expect_config=tiny_swin_config)
    assert checkpoint.model_kind == "swin"
    assert checkpoint.train_mode == "binary_two_logit"
    assert checkpoint.extra == {"best_epoch": 3}
    assert checkpoint.model.config == tiny_swin_config
    assert not checkpoint.model.training
    for name, tensor in model.state_dict().items():
        assert torch.equal(checkpoint.model.state_dict()[name], tensor), name
    assert read_metadata(path)["format_version"] == "1"


def test_unet_round_trip(tmp_path):
    config = UNetConfig(hierarchies=2, base_channels=4)
    model = new_unet(config, seed=2)
    checkpoint = load_checkpoint(save_checkpoint(model, tmp_path / "unet.safetensors"), expect_kind="unet")
    assert checkpoint.train_mode is None
    pixels = torch.rand(1, 3, 16, 16)
    model.eval()
    assert torch.equal(checkpoint.model(pixels), model(pixels))


def test_mismatches_are_checkpoint_errors(tmp_path, tiny_swin_config):
    path = save_checkpoint(new_swin(tiny_swin_config, seed=1), tmp_path / "m.safetensors")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_kind="unet")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_config=tiny_swin_config.model_copy(update={"embed_dim": 16}))

    garbage = tmp_path / "garbage.safetensors"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage)


def test_missing_checkpoint_is_a_dependency_error(tmp_path):
    with pytest.raises(DependencyError):
        load_checkpoint(tmp_path / "absent.safetensors")


def test_backbone_needs_matching_geometry(tmp_path, tiny_swin_config):
    path = save_checkpoint(new_swin(tiny_swin_config.model_copy(update={"num_classes": 6}), seed=1),
                           tmp_path / "multi.safetensors", train_mode="multi_label")
    target = new_swin(tiny_swin_config, seed=2)
    load_backbone(path, into=target)
    wider = new_swin(tiny_swin_config.model_copy(update={"embed_dim": 16}), seed=2)
    with pytest.raises(CheckpointError):
        load_backbone(path, into=wider)
