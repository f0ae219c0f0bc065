import math

import pytest
import torch

from attnseg.config import UNetConfig
from attnseg.errors import ConfigError, InputError
from attnseg.imaging_io import prepare_input
from attnseg.unet import dice_ce_loss, new_unet, unet_forward

SMALL = UNetConfig(hierarchies=2, base_channels=4)


def test_output_shape_and_range():
    model = new_unet(SMALL, seed=0)
    out = model(torch.rand(2, 3, 16, 16))
    assert tuple(out.shape) == (2, 1, 16, 16)
    assert 0.0 <= float(out.min()) and float(out.max()) <= 1.0


def test_zero_parameters_give_one_half():
    model = new_unet(SMALL, seed=0).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    out = model(torch.rand(1, 3, 16, 16))
    assert torch.allclose(out, torch.full_like(out, 0.5))


def test_encoder_sides():
    features = new_unet(SMALL, seed=0).encode(torch.rand(1, 3, 16, 16))
    assert [f.shape[-1] for f in features] == [16, 8, 4]
    assert [f.shape[1] for f in features] == [4, 8, 16]


def test_bad_inputs():
    model = new_unet(SMALL, seed=0)
    with pytest.raises(ConfigError):
        model(torch.rand(1, 3, 18, 18))
    with pytest.raises(InputError):
        model(torch.rand(1, 1, 16, 16))
    with pytest.raises(InputError):
        model(torch.rand(3, 16, 16))


def test_unet_forward_on_model_input(tiny_catalog):
    model_input = prepare_input(tiny_catalog.load(tiny_catalog.ids[0]), 32, multiple=4)
    probabilities = unet_forward(new_unet(SMALL, seed=0), model_input)
    assert tuple(probabilities.shape) == (32, 32)


def test_loss_for_uniform_prediction_on_empty_truth():
    pred = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    gt = torch.zeros_like(pred)
    # soft Dice (0 + 1) / (2 + 0 + 1); BCE ln 2
    expected = (1 - 1 / 3) + math.log(2)
    assert float(dice_ce_loss(pred, gt)) == pytest.approx(expected, rel=1e-9)


def test_loss_near_zero_for_perfect_prediction():
    gt = torch.zeros(2, 1, 8, 8, dtype=torch.float64)
    gt[0, 0, 2:5, 2:5] = 1.0
    assert float(dice_ce_loss(gt.clone(), gt)) < 1e-5


def test_loss_shape_mismatch():
    with pytest.raises(InputError):
        dice_ce_loss(torch.rand(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_loss_gradient_matches_finite_differences():
    generator = torch.Generator().manual_seed(5)
    pred = (0.1 + 0.8 * torch.rand(2, 1, 4, 4, generator=generator, dtype=torch.float64)).requires_grad_()
    gt = (torch.rand(2, 1, 4, 4, generator=generator) > 0.5).to(torch.float64)
    assert torch.autograd.gradcheck(lambda p: dice_ce_loss(p, gt), (pred,), eps=1e-6, atol=1e-6)
