import pytest
from pydantic import ValidationError

from attnseg.config import RunConfig, SegmentConfig, SwinConfig, TrainConfig, load_run_config
from attnseg.errors import ConfigError


def test_desk_scale_geometry():
    config = SwinConfig.desk_scale()
    assert config.layer_grids() == [32, 16, 8, 4]
    assert config.layer_windows() == [4, 4, 4, 4]
    assert config.layer_shifts() == [2, 2, 2, 0]
    assert config.side_multiple == 32


def test_side_that_breaks_the_window_grid_is_rejected():
    # grid 24 -> 12 -> 6: six tokens do not tile into windows of four
    with pytest.raises(ValidationError):
        SwinConfig.desk_scale(input_side=96)
    with pytest.raises(ValidationError):
        SwinConfig(depths=(2, 3), num_heads=(2, 2))


def test_full_scale_geometry_uses_one_window_at_the_last_layer():
    config = SwinConfig.swin_base()
    assert config.layer_windows() == [12, 12, 12, 12]
    assert config.layer_shifts() == [6, 6, 6, 0]
    assert config.positive_index == 1
    assert config.model_copy(update={"num_classes": 1}).positive_index == 0


def test_yaml_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 4\nmethod: sam-binary\nsynth:\n  n_slices: 50\n  positive_fraction: 0.2\n")
    config = load_run_config(path, {"synth": {"n_slices": 80}, "seed": None})
    assert config.seed == 4
    assert config.method == "sam-binary"
    assert config.synth.n_slices == 80 and config.synth.positive_fraction == 0.2
    assert config.swin == SwinConfig.desk_scale()
    assert config.unet is None


def test_invalid_values_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(overrides={"synth": {"positive_fraction": 1.5}})
    with pytest.raises(ConfigError):
        load_run_config(overrides={"unknown_section": 1})
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.yaml")
    listed = tmp_path / "list.yaml"
    listed.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_run_config(listed)


def test_train_for_modes_and_epoch_cap():
    config = RunConfig(seed=3)
    two_logit = config.train_for("binary_two_logit")
    assert two_logit.imbalance == "inverse_frequency_sampling"
    assert two_logit.seed == 3
    assert config.train_for("binary_one_logit").imbalance == "focal_loss"
    assert RunConfig(epochs=2).train_for("unet").max_epochs == 2
    assert RunConfig(epochs=100).train_for("unet").max_epochs == 30

    explicit = RunConfig(train=TrainConfig(mode="multi_label", max_epochs=7))
    assert explicit.train_for("multi_label").max_epochs == 7
    assert explicit.train_for("binary_one_logit").max_epochs == 20


def test_full_scale_learning_rates():
    assert TrainConfig.for_mode("binary_two_logit").resolved_learning_rate == 1e-6
    assert TrainConfig.for_mode("binary_one_logit").resolved_learning_rate == 1e-5
    assert RunConfig(desk_scale=False).swin == SwinConfig.swin_base()


def test_gradient_norm_mode_is_checked():
    assert SegmentConfig(norm_mode="per_window").norm_mode == "per_window"
    with pytest.raises(ValidationError):
        SegmentConfig(norm_mode="frobenius")


def test_output_dir_default_is_resolved_in_one_place():
    from attnseg import config, file_utils
    assert file_utils.OUTPUT_DIR is config.OUTPUT_DIR
