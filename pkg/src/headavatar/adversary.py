"""Discriminator and the non-saturating logistic GAN losses with R1."""

from __future__ import annotations

from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .generators import channel_schedule, resolutions, _seeded
from .layers import EqualConv2d, EqualLinear

R1_GAMMA = 1.0


class Discriminator(nn.Module):
    """Strided conv pyramid down to 4x4, then a dense head producing one logit per image."""

    def __init__(self, resolution: int, base_channels: int = 32, max_channels: int = 64, seed: int = 0):
        super().__init__()
        if resolution < 4 or resolution & (resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {resolution}")
        self.resolution = resolution
        ch = channel_schedule(resolution, base_channels, max_channels)
        with _seeded(seed):
            self.from_rgb = EqualConv2d(3, ch[resolution], 1)
            blocks = []
            for res in reversed(resolutions(resolution)[1:]):
                blocks.append(EqualConv2d(ch[res], ch[res], 3))
                blocks.append(EqualConv2d(ch[res], ch[res // 2], 3, stride=2))
            self.blocks = nn.Sequential(*blocks)
            self.final_conv = EqualConv2d(ch[4], ch[4], 3)
            self.fc = EqualLinear(ch[4] * 16, ch[4], activate=True)
            self.out = EqualLinear(ch[4], 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (self.resolution,) * 2:
            raise ShapeError(f"discriminator expects N x 3 x {self.resolution} x {self.resolution}, "
                             f"got {tuple(image.shape)}")
        x = self.from_rgb(image * 2.0 - 1.0)
        x = self.blocks(x)
        x = self.final_conv(x)
        x = self.fc(x.flatten(1))
        return self.out(x).squeeze(1)


def disc_score(disc: Discriminator, image: torch.Tensor) -> torch.Tensor:
    """Realness logit per image (shape ``N``)."""
    return disc(image)


def loss_g(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor, r1_penalty, gamma: float = R1_GAMMA) -> torch.Tensor:
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean() + 0.5 * gamma * r1_penalty


def r1_penalty(real_logits: torch.Tensor, real_images: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared input-gradient norm of the real logits.

    ``real_images`` must have ``requires_grad`` set before the forward pass.
    """
    (grad,) = torch.autograd.grad(real_logits.sum(), real_images, create_graph=True)
    return grad.pow(2).flatten(1).sum(1).mean()


@contextmanager
def frozen(module: nn.Module):
    """Temporarily disable parameter gradients (used when the other player steps)."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
