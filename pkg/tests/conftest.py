import numpy as np
import pytest
import torch

from attnseg.config import RunConfig, SwinConfig, SynthConfig, UNetConfig
from attnseg.synth import synth_generate


@pytest.fixture
def tiny_swin_config():
    # grid 8 -> 4; layer 1 has two windows per side and a shift of 2
    return SwinConfig(patch_size=4, window_size=4, embed_dim=8, depths=(2, 2), num_heads=(2, 2),
                      num_classes=2, input_side=32)


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(n_slices=24, positive_fraction=0.5, side=32, blob_sigma_range=(1.5, 2.5),
                       slices_per_study=2)


@pytest.fixture
def tiny_catalog(tiny_synth_config):
    return synth_generate(tiny_synth_config, seed=3)


@pytest.fixture
def tiny_run_config(tmp_path, tiny_swin_config, tiny_synth_config):
    return RunConfig(
        output_dir=str(tmp_path / "run"),
        swin=tiny_swin_config,
        unet=UNetConfig(hierarchies=2, base_channels=4),
        synth=tiny_synth_config,
        segment={"fused_layers": (1, 2)},  # the tiny classifier has two layers
        evaluate={"k": 2},
        epochs=1,
        seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
