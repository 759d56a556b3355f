"""Face, background and composite generators.

``StyleGenerator`` is a StyleGAN2-style synthesis network (learned 4x4
constant, modulated convs, noise, skip-summed to-image outputs) used for both
the face canvas and the background canvas. ``CompositeGenerator`` is the
condition-driven U-shaped network that turns the canvases plus the tracked
render and UV rasters into the avatar image and its foreground mask.
``AvatarModel`` owns all three together with their global latent codes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .config import is_power_of_two
from .errors import ConfigError, ShapeError
from .layers import (EqualConv2d, MappingNetwork, StyledLayer, ToImage, upsample2x)

NETWORKS = ("face", "background", "composite")


@dataclass
class GenConfig:
    resolution: int = 64
    latent_dim: int = 64
    base_channels: int = 32
    max_channels: int = 64
    mapping_layers: int = 2
    # network name -> partial {base_channels, max_channels, mapping_layers}
    overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not is_power_of_two(self.resolution) or self.resolution < 32:
            raise ConfigError(f"resolution must be a power of two >= 32, got {self.resolution}")
        if self.latent_dim < 1 or self.mapping_layers < 1:
            raise ConfigError("latent_dim and mapping_layers must be positive")
        for name in set(self.overrides) - set(NETWORKS):
            raise ConfigError(f"override for unknown network {name!r}")
        for name in NETWORKS:
            if self.for_network(name)["base_channels"] < 8:
                raise ConfigError(f"base_channels must be >= 8 ({name})")

    def for_network(self, name: str) -> dict:
        opts = {"base_channels": self.base_channels, "max_channels": self.max_channels,
                "mapping_layers": self.mapping_layers}
        extra = self.overrides.get(name, {})
        unknown = set(extra) - set(opts)
        if unknown:
            raise ConfigError(f"unknown override keys for {name}: {sorted(unknown)}")
        opts.update(extra)
        return opts


def channel_schedule(resolution: int, base_channels: int, max_channels: int) -> dict[int, int]:
    """Channels per resolution: ``base_channels`` at full size, doubling per halving, capped."""
    out = {}
    res, ch = resolution, base_channels
    while res >= 4:
        out[res] = min(ch, max(max_channels, base_channels))
        res //= 2
        ch *= 2
    return out


def resolutions(resolution: int) -> list[int]:
    return [4 * 2 ** i for i in range(int(math.log2(resolution // 4)) + 1)]


@contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@dataclass
class LatentCode:
    """A latent vector plus per-layer noise rasters (``None`` = frozen buffers)."""

    z: torch.Tensor
    noise: Optional[list[torch.Tensor]] = None


@dataclass
class ConditionSet:
    """Composite-generator inputs, all N x 3 x R x R in [-1, 1]."""

    face_canvas: torch.Tensor
    background_canvas: torch.Tensor
    render: torch.Tensor
    uv: torch.Tensor

    def stacked(self) -> torch.Tensor:
        n = max(t.shape[0] for t in (self.face_canvas, self.background_canvas, self.render, self.uv))
        parts = [t.expand(n, -1, -1, -1) for t in
                 (self.face_canvas, self.background_canvas, self.render, self.uv)]
        sizes = {tuple(p.shape[-2:]) for p in parts}
        if len(sizes) != 1:
            raise ShapeError(f"condition rasters disagree on resolution: {sorted(sizes)}")
        return torch.cat(parts, dim=1)


@dataclass
class GeneratorOutput:
    avatar: torch.Tensor           # N x 3 x R x R in [0, 1]
    mask: torch.Tensor             # N x 1 x R x R in [0, 1]
    face_canvas: Optional[torch.Tensor] = None
    background_canvas: Optional[torch.Tensor] = None


class _NoiseMixin:
    """Frozen per-layer noise buffers, used whenever no fresh noise is passed."""

    def _register_noise(self, layers: Sequence[StyledLayer]):
        self.noise_resolutions = [layer.resolution for layer in layers]
        for i, res in enumerate(self.noise_resolutions):
            self.register_buffer(f"noise_{i}", torch.randn(1, 1, res, res))

    def frozen_noise(self) -> list[torch.Tensor]:
        return [getattr(self, f"noise_{i}") for i in range(len(self.noise_resolutions))]

    def noise_shapes(self, batch: int = 1) -> list[tuple[int, ...]]:
        return [(batch, 1, r, r) for r in self.noise_resolutions]

    def _check_noise(self, noise):
        if noise is None:
            return self.frozen_noise()
        if len(noise) != len(self.noise_resolutions):
            raise ShapeError(f"expected {len(self.noise_resolutions)} noise rasters, got {len(noise)}")
        for n, r in zip(noise, self.noise_resolutions):
            if tuple(n.shape[-2:]) != (r, r):
                raise ShapeError(f"noise raster {tuple(n.shape)} does not match resolution {r}")
        return noise


class StyleGenerator(_NoiseMixin, nn.Module):
    """Unconditional StyleGAN2-style synthesis: z -> RGB in [-1, 1]."""

    def __init__(self, resolution, latent_dim, base_channels, max_channels, mapping_layers):
        super().__init__()
        self.resolution = resolution
        self.latent_dim = latent_dim
        ch = channel_schedule(resolution, base_channels, max_channels)
        self.mapping = MappingNetwork(latent_dim, latent_dim, mapping_layers)
        self.const = nn.Parameter(torch.randn(1, ch[4], 4, 4))
        self.layers = nn.ModuleList([StyledLayer(ch[4], ch[4], latent_dim, 4)])
        self.to_images = nn.ModuleList([ToImage(ch[4], 3, latent_dim)])
        for res in resolutions(resolution)[1:]:
            self.layers.append(StyledLayer(ch[res // 2], ch[res], latent_dim, res, upsample=True))
            self.layers.append(StyledLayer(ch[res], ch[res], latent_dim, res))
            self.to_images.append(ToImage(ch[res], 3, latent_dim))
        self._register_noise(self.layers)

    def forward(self, z: torch.Tensor, noise: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent has dimension {z.shape[-1]}, expected {self.latent_dim}")
        noise = self._check_noise(noise)
        w = self.mapping(z)
        x = self.const.expand(z.shape[0], -1, -1, -1)
        x = self.layers[0](x, w, noise[0])
        img = self.to_images[0](x, w)
        for level in range(1, len(self.to_images)):
            i = 2 * level - 1
            x = self.layers[i](x, w, noise[i])
            x = self.layers[i + 1](x, w, noise[i + 1])
            img = upsample2x(img) + self.to_images[level](x, w)
        return torch.tanh(img)


class CompositeGenerator(_NoiseMixin, nn.Module):
    """Condition encoder + style-modulated decoder with encoder skips.

    The 12-channel condition stack is encoded down to 4x4. The decoder
    upsamples with modulated convs, concatenating the encoder features at each
    resolution, and sums a 4-channel to-image output per resolution. Channels
    0-2 become the avatar (tanh, rescaled to [0, 1]); channel 3 the mask
    (sigmoid).
    """

    in_channels = 12
    out_channels = 4

    def __init__(self, resolution, latent_dim, base_channels, max_channels, mapping_layers):
        super().__init__()
        self.resolution = resolution
        self.latent_dim = latent_dim
        ch = channel_schedule(resolution, base_channels, max_channels)
        res_list = resolutions(resolution)
        self.mapping = MappingNetwork(latent_dim, latent_dim, mapping_layers)

        self.from_cond = EqualConv2d(self.in_channels, ch[resolution], 1)
        self.enc_blocks = nn.ModuleDict()
        self.enc_down = nn.ModuleDict()
        for res in reversed(res_list[1:]):
            self.enc_blocks[str(res)] = EqualConv2d(ch[res], ch[res], 3)
            self.enc_down[str(res)] = EqualConv2d(ch[res], ch[res // 2], 3, stride=2)
        self.enc_bottom = EqualConv2d(ch[4], ch[4], 3)

        self.layers = nn.ModuleList([StyledLayer(ch[4], ch[4], latent_dim, 4)])
        self.to_images = nn.ModuleList([ToImage(ch[4], self.out_channels, latent_dim)])
        for res in res_list[1:]:
            self.layers.append(StyledLayer(ch[res // 2], ch[res], latent_dim, res, upsample=True))
            self.layers.append(StyledLayer(2 * ch[res], ch[res], latent_dim, res))
            self.to_images.append(ToImage(ch[res], self.out_channels, latent_dim))
        self._register_noise(self.layers)

    @property
    def num_levels(self) -> int:
        return len(self.to_images)

    def encode(self, cond: torch.Tensor) -> dict[int, torch.Tensor]:
        x = self.from_cond(cond)
        skips = {}
        res = self.resolution
        while res > 4:
            x = self.enc_blocks[str(res)](x)
            skips[res] = x
            x = self.enc_down[str(res)](x)
            res //= 2
        skips[4] = self.enc_bottom(x)
        return skips

    def forward(self, cond: torch.Tensor, z: torch.Tensor, noise=None,
                to_image_mask: Optional[Sequence[bool]] = None) -> tuple[torch.Tensor, torch.Tensor]:
        if cond.ndim != 4 or cond.shape[1] != self.in_channels:
            raise ShapeError(f"condition stack must be N x {self.in_channels} x R x R, got {tuple(cond.shape)}")
        if tuple(cond.shape[-2:]) != (self.resolution, self.resolution):
            raise ShapeError(f"condition resolution {tuple(cond.shape[-2:])} != {self.resolution}")
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent has dimension {z.shape[-1]}, expected {self.latent_dim}")
        if to_image_mask is None:
            to_image_mask = [True] * self.num_levels
        if len(to_image_mask) != self.num_levels:
            raise ShapeError(f"to_image_mask needs {self.num_levels} entries")
        noise = self._check_noise(noise)
        w = self.mapping(z)
        skips = self.encode(cond)

        x = self.layers[0](skips[4], w, noise[0])
        img = self.to_images[0](x, w)
        if not to_image_mask[0]:
            img = torch.zeros_like(img)
        res = 4
        for level in range(1, self.num_levels):
            res *= 2
            i = 2 * level - 1
            x = self.layers[i](x, w, noise[i])
            x = self.layers[i + 1](torch.cat([x, skips[res]], dim=1), w, noise[i + 1])
            img = upsample2x(img)
            if to_image_mask[level]:
                img = img + self.to_images[level](x, w)
        avatar = (torch.tanh(img[:, :3]) + 1.0) * 0.5
        mask = torch.sigmoid(img[:, 3:4])
        return avatar, mask


class AvatarModel(nn.Module):
    """The full generation pipeline with its global per-identity latents."""

    def __init__(self, cfg: GenConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        R, D = cfg.resolution, cfg.latent_dim
        with _seeded(seed):
            self.g_face = StyleGenerator(R, D, **cfg.for_network("face"))
            self.g_back = StyleGenerator(R, D, **cfg.for_network("background"))
            self.g_style = CompositeGenerator(R, D, **cfg.for_network("composite"))
            self.z_face = nn.Parameter(torch.randn(D))
            self.z_back = nn.Parameter(torch.randn(D))
            self.z_style = nn.Parameter(torch.randn(D))

    def noise_shapes(self) -> dict[str, list[tuple[int, ...]]]:
        return {"face": self.g_face.noise_shapes(), "background": self.g_back.noise_shapes(),
                "composite": self.g_style.noise_shapes()}

    def sample_noise(self, generator: torch.Generator) -> dict[str, list[torch.Tensor]]:
        return {name: [torch.randn(shape, generator=generator) for shape in shapes]
                for name, shapes in self.noise_shapes().items()}

    def gen_face(self, latent: Optional[LatentCode] = None) -> torch.Tensor:
        latent = latent or LatentCode(self.z_face)
        return self.g_face(latent.z, latent.noise)

    def gen_background(self, latent: Optional[LatentCode] = None) -> torch.Tensor:
        latent = latent or LatentCode(self.z_back)
        return self.g_back(latent.z, latent.noise)

    def gen_avatar(self, cond: ConditionSet, latent: Optional[LatentCode] = None,
                   to_image_mask=None) -> GeneratorOutput:
        latent = latent or LatentCode(self.z_style)
        avatar, mask = self.g_style(cond.stacked(), latent.z, latent.noise, to_image_mask)
        return GeneratorOutput(avatar, mask, cond.face_canvas, cond.background_canvas)

    def forward(self, render: torch.Tensor, uv: torch.Tensor,
                noise: Optional[dict[str, list[torch.Tensor]]] = None,
                canvases: Optional[tuple[torch.Tensor, torch.Tensor]] = None) -> GeneratorOutput:
        """Run the pipeline on N x 3 x R x R render/uv rasters in [0, 1].

        ``noise=None`` uses the frozen buffers. Precomputed ``canvases`` skip
        the face/background generators (inference with frozen latents).
        """
        noise = noise or {}
        if canvases is None:
            face = self.gen_face(LatentCode(self.z_face, noise.get("face")))
            back = self.gen_background(LatentCode(self.z_back, noise.get("background")))
        else:
            face, back = canvases
        cond = ConditionSet(face, back, render * 2.0 - 1.0, uv * 2.0 - 1.0)
        return self.gen_avatar(cond, LatentCode(self.z_style, noise.get("composite")))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "face": list(self.g_face.parameters()),
            "background": list(self.g_back.parameters()),
            "composite": list(self.g_style.parameters()),
            "latents": [self.z_face, self.z_back, self.z_style],
        }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "GenConfig", "LatentCode", "ConditionSet", "GeneratorOutput", "StyleGenerator",
    "CompositeGenerator", "AvatarModel", "channel_schedule", "count_parameters",
]
