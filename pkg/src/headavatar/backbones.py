"""Frozen multi-layer feature extractors.

The losses and metrics need a fixed network that maps images to feature maps
at several depths. Pretrained VGG/ResNet weights are not bundled; instead
:func:`build_surrogate` draws a random strided conv stack from a seeded stream.
Real weights can be dropped in through :func:`load_backbone` as long as they
fit the same stage structure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .config import to_dict
from .errors import ConfigError, FormatError, ShapeError

NONLINEARITIES: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "leaky_relu": lambda x: F.leaky_relu(x, 0.2),
    "tanh": torch.tanh,
    "softplus": F.softplus,
    "gelu": F.gelu,
}


@dataclass(frozen=True)
class BackboneSpec:
    seed: int = 1234
    stages: tuple = ((16, 2), (32, 2), (64, 2), (128, 2))
    nonlinearity: str = "leaky_relu"
    tap_layers: tuple = (0, 1, 2, 3)
    in_channels: int = 3
    kernel_size: int = 3

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for ch, stride in self.stages:
            if ch < 1 or stride not in (1, 2):
                raise ConfigError(f"invalid stage (channels={ch}, stride={stride})")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not self.tap_layers or any(not 0 <= t < len(self.stages) for t in self.tap_layers):
            raise ConfigError(f"tap_layers {self.tap_layers} not within {len(self.stages)} stages")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, s in self.stages]))

    def to_json(self) -> dict:
        d = to_dict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d["stages"])
        d["tap_layers"] = tuple(d["tap_layers"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DEFAULT_SPEC = BackboneSpec()


@dataclass
class FeaturePyramid:
    """Tap index -> N x C x H x W feature map, plus the backbone that made it."""

    features: dict[int, torch.Tensor]
    provenance: str

    def __getitem__(self, tap: int) -> torch.Tensor:
        return self.features[tap]

    def pooled(self, taps: Sequence[int]) -> list[torch.Tensor]:
        return [self.features[t].mean(dim=(2, 3)) for t in taps]


class Backbone(nn.Module):
    """Strided conv stack with frozen weights held as buffers."""

    def __init__(self, spec: BackboneSpec, weights: Sequence[tuple[torch.Tensor, torch.Tensor]]):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.act = NONLINEARITIES[spec.nonlinearity]
        self.strides = [s for _, s in spec.stages]
        for i, (w, b) in enumerate(weights):
            self.register_buffer(f"stage{i}_weight", w.detach().clone())
            self.register_buffer(f"stage{i}_bias", b.detach().clone())
        self.provenance = f"{spec.digest()}-{self.weights_hash()[:16]}"

    def weights_hash(self) -> str:
        return archive.state_hash({k: v for k, v in self.state_dict().items()})

    def named_weights(self) -> dict[str, torch.Tensor]:
        return dict(self.state_dict())

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        return self.extract(image)

    def extract(self, image: torch.Tensor) -> FeaturePyramid:
        if image.ndim == 3:
            image = image[None]
        if image.ndim != 4 or image.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected N x {self.spec.in_channels} x H x W, got {tuple(image.shape)}")
        if min(image.shape[-2:]) < self.spec.total_stride:
            raise ShapeError(
                f"image {tuple(image.shape[-2:])} smaller than cumulative stride {self.spec.total_stride}")
        x = image * 2.0 - 1.0
        taps = set(self.spec.tap_layers)
        last = max(taps)
        out = {}
        pad = self.spec.kernel_size // 2
        for i, stride in enumerate(self.strides):
            w = getattr(self, f"stage{i}_weight").to(x.dtype)
            b = getattr(self, f"stage{i}_bias").to(x.dtype)
            x = self.act(F.conv2d(x, w, b, stride=stride, padding=pad))
            if i in taps:
                out[i] = x
            if i == last:
                break
        return FeaturePyramid(out, self.provenance)


def extract_features(backbone: Backbone, image: torch.Tensor) -> FeaturePyramid:
    return backbone.extract(image)


def build_surrogate(spec: BackboneSpec = DEFAULT_SPEC) -> Backbone:
    """Random frozen backbone; weights ~ N(0, 1/fan_in) from ``spec.seed``, zero biases."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    weights = []
    cin = spec.in_channels
    k = spec.kernel_size
    for cout, _ in spec.stages:
        fan_in = cin * k * k
        w = rng.standard_normal((cout, cin, k, k)) / np.sqrt(fan_in)
        weights.append((torch.from_numpy(w.astype(np.float32)), torch.zeros(cout)))
        cin = cout
    backbone = Backbone(spec, weights)
    backbone.requires_grad_(False)
    return backbone.eval()


def save_backbone(backbone: Backbone, path: str | Path) -> str:
    meta = {"kind": "backbone", "spec": backbone.spec.to_json()}
    return archive.save(path, backbone.named_weights(), meta)


def load_backbone(path: str | Path, spec: BackboneSpec | None = None) -> Backbone:
    """Load archived weights. ``spec`` (if given) must match the archived stage layout."""
    tensors, manifest = archive.load(path)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "backbone" or "spec" not in meta:
        raise FormatError(f"{path} is not a backbone archive")
    try:
        stored = BackboneSpec.from_json(meta["spec"])
        stored.validate()
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"invalid backbone spec in {path}: {exc}") from exc
    if spec is not None and tuple(spec.stages) != tuple(stored.stages):
        raise FormatError(f"archive stages {stored.stages} do not match expected {spec.stages}")
    use = spec or stored
    n_stage_blobs = len({n.split("_")[0] for n in tensors})
    if n_stage_blobs != len(use.stages):
        raise FormatError(f"archive has {n_stage_blobs} stages, spec declares {len(use.stages)}")
    weights = []
    cin = use.in_channels
    k = use.kernel_size
    for i, (cout, _) in enumerate(use.stages):
        try:
            w, b = tensors[f"stage{i}_weight"], tensors[f"stage{i}_bias"]
        except KeyError as exc:
            raise FormatError(f"archive lacks blob {exc}") from exc
        if tuple(w.shape) != (cout, cin, k, k) or tuple(b.shape) != (cout,):
            raise FormatError(f"stage {i}: weight {w.shape} / bias {b.shape} do not match spec")
        weights.append((torch.from_numpy(w.copy()), torch.from_numpy(b.copy())))
        cin = cout
    backbone = Backbone(use, weights)
    backbone.requires_grad_(False)
    return backbone.eval()


__all__ = [
    "BackboneSpec", "FeaturePyramid", "Backbone", "DEFAULT_SPEC", "build_surrogate",
    "extract_features", "load_backbone", "save_backbone",
]
