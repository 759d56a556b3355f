"""Detail reconstruction losses: mask MAE, ID-MRF foreground, L1, cosine embedding.

All losses take images in [0, 1] as N x C x H x W tensors and return a scalar
averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .backbones import Backbone
from .errors import ConfigError, DegenerateInputError, ShapeError

NORM_EPS = 1e-12
COS_EPS = 1e-8


@dataclass
class LossWeights:
    mask: float = 3.0
    mrf: float = 5e-2
    l1: float = 1.0
    cos: float = 1.0
    d: float = 1.0
    g: float = 1.0

    def validate(self) -> None:
        for name, value in vars(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {value}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in vars(self).items()})


@dataclass
class LossBreakdown:
    mask: float = 0.0
    mrf: float = 0.0
    l1: float = 0.0
    cos: float = 0.0
    g: float = 0.0
    d: float = 0.0
    total: float = 0.0


@dataclass
class IdMrfConfig:
    bandwidth: float = 0.5
    epsilon: float = 1e-5
    patch_size: int = 1
    tap_layers: tuple = (1, 2)
    layer_weights: tuple = (1.0, 1.0)
    center: bool = False

    def validate(self) -> None:
        if self.bandwidth <= 0 or self.epsilon <= 0:
            raise ConfigError("ID-MRF bandwidth and epsilon must be positive")
        if self.patch_size not in (1, 3):
            raise ConfigError(f"patch_size must be 1 or 3, got {self.patch_size}")
        if len(self.layer_weights) != len(self.tap_layers):
            raise ConfigError("layer_weights must have one entry per tap layer")
        if any(w < 0 for w in self.layer_weights):
            raise ConfigError("layer_weights must be nonnegative")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def loss_mask(pred_mask: torch.Tensor, background_mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the predicted mask and the true foreground."""
    _same_shape(pred_mask, background_mask, "loss_mask")
    return (pred_mask - (1.0 - background_mask)).abs().mean()


def loss_l1(avatar: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    _same_shape(avatar, real, "loss_l1")
    return (avatar - real).abs().mean()


def foreground_pair(pred_mask, avatar, background_mask, real):
    """Hadamard-masked (fake, real) foregrounds fed to the ID-MRF loss."""
    return pred_mask * avatar, (1.0 - background_mask) * real


# ---------------------------------------------------------------------------
# ID-MRF
# ---------------------------------------------------------------------------

def _patches(feat: torch.Tensor, patch_size: int) -> torch.Tensor:
    """N x C x H x W -> N x P x D patch vectors (scan order: row-major)."""
    if patch_size == 1:
        return feat.flatten(2).transpose(1, 2)
    if min(feat.shape[-2:]) < patch_size:
        raise DegenerateInputError(f"feature map {tuple(feat.shape[-2:])} smaller than patch {patch_size}")
    return F.unfold(feat, patch_size).transpose(1, 2)


def _exclusive_logsumexp(x: torch.Tensor) -> torch.Tensor:
    """out[..., s] = log sum_{r != s} exp(x[..., r]), computed without cancellation.

    For s other than the row maximum, exp(x_s - lse) <= 1/2, so
    lse + log1p(-exp(x_s - lse)) is well conditioned. The maximal column gets
    the logsumexp of the row with that entry removed.
    """
    top = x.argmax(dim=-1, keepdim=True)
    is_top = torch.zeros_like(x, dtype=torch.bool).scatter_(-1, top, True)
    lse_rest = torch.logsumexp(x.masked_fill(is_top, float("-inf")), dim=-1, keepdim=True)
    lse_all = torch.logaddexp(lse_rest, x.gather(-1, top))
    ratio = (x - lse_all).masked_fill(is_top, -1.0)
    return torch.where(is_top, lse_rest, lse_all + torch.log1p(-torch.exp(ratio)))


def idmrf_layer(fake_feat: torch.Tensor, real_feat: torch.Tensor, bandwidth: float = 0.5,
                epsilon: float = 1e-5, patch_size: int = 1, center: bool = False) -> torch.Tensor:
    """ID-MRF loss for one feature layer, averaged over the batch.

    For fake patches v and real patches s with cosine similarity mu(v, s)::

        RS(v, s)  = exp(mu(v, s) / (max_{r != s} mu(v, r) + epsilon) / bandwidth)
        RSn(v, s) = RS(v, s) / sum_{r != s} RS(v, r)
        loss      = -log(mean_s max_v RSn(v, s))
    """
    _same_shape(fake_feat, real_feat, "idmrf")
    v = _patches(fake_feat, patch_size)
    s = _patches(real_feat, patch_size)
    n_real = s.shape[1]
    if n_real < 2:
        raise DegenerateInputError("ID-MRF needs at least 2 real patches per layer")
    if center:
        mean = s.mean(dim=1, keepdim=True)
        v, s = v - mean, s - mean
    vn = v / v.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    sn = s / s.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    mu = vn @ sn.transpose(1, 2)                              # N x Pv x Ps

    top_val, top_idx = mu.topk(2, dim=-1)
    is_best = torch.arange(n_real, device=mu.device) == top_idx[..., :1]
    max_other = torch.where(is_best, top_val[..., 1:2], top_val[..., :1])
    log_rs = mu / (max_other + epsilon) / bandwidth          # log RS(v, s)
    log_rs_norm = log_rs - _exclusive_logsumexp(log_rs)      # log RSn(v, s)

    # argmax returns the first maximal v, so ties route gradient in scan order
    best_v = log_rs_norm.argmax(dim=1, keepdim=True)
    best = log_rs_norm.gather(1, best_v).squeeze(1)          # N x Ps
    per_sample = math.log(n_real) - torch.logsumexp(best, dim=-1)
    return per_sample.mean()


def idmrf_from_features(fake_feats: Sequence[torch.Tensor], real_feats: Sequence[torch.Tensor],
                        cfg: IdMrfConfig) -> torch.Tensor:
    total = 0.0
    for weight, f, r in zip(cfg.layer_weights, fake_feats, real_feats):
        total = total + weight * idmrf_layer(f, r, cfg.bandwidth, cfg.epsilon, cfg.patch_size, cfg.center)
    return total


def loss_idmrf(fake_fg: torch.Tensor, real_fg: torch.Tensor, backbone: Backbone,
               cfg: Optional[IdMrfConfig] = None) -> torch.Tensor:
    cfg = cfg or IdMrfConfig()
    cfg.validate()
    _same_shape(fake_fg, real_fg, "loss_idmrf")
    fake = backbone.extract(fake_fg)
    with torch.no_grad():
        real = backbone.extract(real_fg)
    return idmrf_from_features([fake[t] for t in cfg.tap_layers],
                               [real[t] for t in cfg.tap_layers], cfg)


# ---------------------------------------------------------------------------
# cosine embedding loss
# ---------------------------------------------------------------------------

Embedder = Union[Backbone, Callable[[torch.Tensor], Sequence[torch.Tensor]]]

DEFAULT_COS_TAPS = (2, 3)


def embed(embedder: Embedder, image: torch.Tensor, taps: Sequence[int] = DEFAULT_COS_TAPS) -> list[torch.Tensor]:
    """Globally pooled N x K vectors, one per tap (or whatever a custom embedder returns)."""
    if isinstance(embedder, Backbone):
        return embedder.extract(image).pooled(taps)
    return list(embedder(image))


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)


def loss_cos(avatar: torch.Tensor, real: torch.Tensor, embedder: Embedder,
             taps: Sequence[int] = DEFAULT_COS_TAPS) -> torch.Tensor:
    """Mean over taps (and batch) of 1 - cos(e_fake, e_real); lies in [0, 2]."""
    _same_shape(avatar, real, "loss_cos")
    fake_e = embed(embedder, avatar, taps)
    with torch.no_grad():
        real_e = embed(embedder, real, taps)
    terms = [(1.0 - cosine(f, r)).mean() for f, r in zip(fake_e, real_e)]
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# weighted totals
# ---------------------------------------------------------------------------

def total_loss(b: LossBreakdown, w: LossWeights) -> tuple[float, float]:
    """(generator objective, discriminator objective) under weights ``w``."""
    gen = w.mask * b.mask + w.mrf * b.mrf + w.l1 * b.l1 + w.cos * b.cos + w.g * b.g
    return gen, w.d * b.d


def generator_objective(terms: dict[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    """Tensor form of the generator total; absent terms count as zero."""
    total = 0.0
    for name in ("mask", "mrf", "l1", "cos", "g"):
        if name in terms:
            total = total + getattr(w, name) * terms[name]
    return total


__all__ = [
    "LossWeights", "LossBreakdown", "IdMrfConfig", "loss_mask", "loss_l1", "loss_idmrf",
    "idmrf_layer", "idmrf_from_features", "loss_cos", "cosine", "embed", "total_loss",
    "generator_objective", "foreground_pair",
]
