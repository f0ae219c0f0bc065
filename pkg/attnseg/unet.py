"""Fully supervised encoder-decoder baseline trained on pixel masks."""
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import UNetConfig
from .errors import InputError

SOFT_DICE_EPS = 1.0


def conv_bn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(conv_bn_relu(in_ch, out_ch), conv_bn_relu(out_ch, out_ch))


class UNet(nn.Module):
    """`hierarchies` poolings down, as many transposed-conv steps up, skip features concatenated."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        channels = [config.base_channels * 2 ** i for i in range(config.hierarchies + 1)]
        self.encoders = nn.ModuleList()
        in_ch = config.in_channels
        for out_ch in channels[:-1]:
            self.encoders.append(double_conv(in_ch, out_ch))
            in_ch = out_ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = double_conv(channels[-2], channels[-1])
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(config.hierarchies)):
            self.ups.append(nn.ConvTranspose2d(channels[level + 1], channels[level], 2, stride=2))
            self.decoders.append(double_conv(2 * channels[level], channels[level]))
        self.out = nn.Conv2d(channels[0], config.out_channels, 1)

    def encode(self, x) -> List[torch.Tensor]:
        """Feature grids from full resolution down to the bottleneck."""
        self.config.check_side(x.shape[-1])
        features = []
        for encoder in self.encoders:
            x = encoder(x)
            features.append(x)
            x = self.pool(x)
        features.append(self.bottleneck(x))
        return features

    def forward(self, x):
        """[B, 3, S, S] -> per-pixel foreground probability [B, 1, S, S]."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[-1] != x.shape[-2]:
            raise InputError(f"expected input [B, {self.config.in_channels}, S, S], got {tuple(x.shape)}")
        features = self.encode(x)
        x = features[-1]
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(features[:-1])):
            x = decoder(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.out(x))


def unet_forward(model: UNet, model_input) -> torch.Tensor:
    """Probability grid [S, S] for one ModelInput."""
    pixels = model_input.as_tensor().to(dtype=next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        return model(pixels)[0, 0]


def dice_ce_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = SOFT_DICE_EPS) -> torch.Tensor:
    """(1 - soft Dice) + binary cross-entropy, averaged over the batch.

    pred holds probabilities; soft Dice is computed per sample with smoothing eps.
    """
    if pred.shape != gt.shape:
        raise InputError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    if pred.ndim < 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    flat_pred = pred.reshape(pred.shape[0], -1)
    flat_gt = gt.reshape(gt.shape[0], -1)
    intersection = (flat_pred * flat_gt).sum(dim=1)
    soft_dice = (2.0 * intersection + eps) / (flat_pred.sum(dim=1) + flat_gt.sum(dim=1) + eps)
    bce = F.binary_cross_entropy(flat_pred.clamp(1e-7, 1 - 1e-7), flat_gt)
    return (1.0 - soft_dice).mean() + bce


def new_unet(config: UNetConfig = UNetConfig(), seed=None) -> UNet:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(config)
