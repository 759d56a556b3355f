"""Equalized-learning-rate building blocks in the StyleGAN2 style."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

SQRT2 = math.sqrt(2.0)


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * SQRT2


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class EqualLinear(nn.Module):
    def __init__(self, in_features, out_features, bias_init=0.0, lr_mul=1.0, activate=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul
        self.activate = activate

    def forward(self, x):
        out = F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)
        return lrelu(out) if self.activate else out


class EqualConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, activate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.stride = stride
        self.padding = kernel_size // 2
        self.activate = activate

    def forward(self, x):
        out = F.conv2d(x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding)
        return lrelu(out) if self.activate else out


class MappingNetwork(nn.Module):
    """z -> w through a small MLP after normalizing z to unit RMS."""

    def __init__(self, z_dim, w_dim, num_layers=2, lr_mul=0.01):
        super().__init__()
        dims = [z_dim] + [w_dim] * num_layers
        self.layers = nn.Sequential(*[
            EqualLinear(dims[i], dims[i + 1], lr_mul=lr_mul, activate=True)
            for i in range(num_layers)
        ])

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        return self.layers(z)


class ModulatedConv2d(nn.Module):
    """Convolution whose input channels are scaled by a style, then demodulated.

    Uses the non-fused formulation: scale activations, run one shared conv,
    rescale outputs. Mathematically identical to per-sample weights.
    """

    def __init__(self, in_channels, out_channels, kernel_size, w_dim, demodulate=True, upsample=False):
        super().__init__()
        self.affine = EqualLinear(w_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2
        self.demodulate = demodulate
        self.upsample = upsample

    def forward(self, x, w):
        style = self.affine(w)
        weight = self.weight * self.scale
        if self.upsample:
            x = upsample2x(x)
        x = x * style[:, :, None, None]
        x = F.conv2d(x, weight, padding=self.padding)
        if self.demodulate:
            dcoef = torch.rsqrt((weight.pow(2).sum(dim=(2, 3))[None] * style.pow(2)[:, None, :]).sum(-1) + 1e-8)
            x = x * dcoef[:, :, None, None]
        return x


class StyledLayer(nn.Module):
    """Modulated conv + per-pixel noise + bias + activation."""

    def __init__(self, in_channels, out_channels, w_dim, resolution, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, w_dim, upsample=upsample)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.resolution = resolution

    def forward(self, x, w, noise=None):
        x = self.conv(x, w)
        if noise is not None:
            x = x + self.noise_strength * noise
        return lrelu(x + self.bias[None, :, None, None])


class ToImage(nn.Module):
    def __init__(self, in_channels, out_channels, w_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 1, w_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]
