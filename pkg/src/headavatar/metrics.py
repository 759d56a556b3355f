"""Image quality metrics: SSIM, PSNR, an LPIPS-style distance and FID.

Pixel metrics run in float64 numpy on H x W x C arrays in [0, 1]. The
perceptual distance and FID use a backbone; their numbers are only comparable
between runs that report the same backbone provenance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.signal import fftconvolve

from .backbones import Backbone
from .errors import DegenerateInputError, NumericalError, ShapeError

PSNR_INF = float("inf")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
NEG_EIG_TOL = 1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise ShapeError(f"mean {self.mean.shape} and covariance {self.cov.shape} disagree")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-8:
            raise ShapeError("covariance is not symmetric")


@dataclass
class MetricReport:
    ssim: float
    psnr_db: float
    perceptual: float
    fid: Optional[float]
    frame_count: int
    backbone: str

    def to_json(self) -> dict:
        psnr = self.psnr_db
        return {
            "ssim": self.ssim,
            "psnr_db": psnr if math.isfinite(psnr) else "inf",
            "perceptual": self.perceptual,
            "fid": self.fid,
            "frame_count": self.frame_count,
            "backbone": self.backbone,
        }


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; ``inf`` if identical."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return fftconvolve(x, window[:, :, None], mode="valid", axes=(0, 1))


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM over the valid region (no padding), shape H' x W' x C."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}px per side, got {a.shape[:2]}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a * mu_a
    var_b = _filter(b * b, w) - mu_b * mu_b
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean windowed SSIM over windows and channels (11x11 Gaussian, sigma 1.5)."""
    return float(np.mean(ssim_map(a, b, data_range)))


def _to_nchw(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img, dtype=np.float32))
    if t.ndim == 3:
        t = t.permute(2, 0, 1)[None]
    elif t.ndim == 4 and t.shape[-1] == 3:
        t = t.permute(0, 3, 1, 2)
    return t


def _unit_channels(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


@torch.no_grad()
def perceptual_distance(a, b, backbone: Backbone, taps: Optional[Sequence[int]] = None) -> float:
    """LPIPS-style distance with unit layer weights.

    Per tap: unit-normalize the channel vector at each location, take the
    mean squared difference over channels and space; sum over taps.
    """
    ta, tb = _to_nchw(a), _to_nchw(b)
    if ta.shape != tb.shape:
        raise ShapeError(f"images differ in shape: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    taps = tuple(taps) if taps is not None else backbone.spec.tap_layers
    fa, fb = backbone.extract(ta), backbone.extract(tb)
    total = 0.0
    for t in taps:
        diff = _unit_channels(fa[t].double()) - _unit_channels(fb[t].double())
        total += float(diff.pow(2).mean())
    return total


@torch.no_grad()
def embeddings(images: Iterable, backbone: Backbone, tap: Optional[int] = None) -> np.ndarray:
    """Globally pooled final-tap features, one row per image."""
    tap = max(backbone.spec.tap_layers) if tap is None else tap
    rows = [backbone.extract(_to_nchw(img))[tap].mean(dim=(2, 3)).double().numpy() for img in images]
    return np.concatenate(rows, axis=0)


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased sample covariance (symmetrized)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInputError(f"need at least 2 feature vectors, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min(initial=0.0) < -NEG_EIG_TOL:
        raise NumericalError(f"{what} has eigenvalue {vals.min():.3g} below -{NEG_EIG_TOL}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    Tr((S1 S2)^(1/2)) is evaluated as Tr((A S2 A)^(1/2)) with A = S1^(1/2),
    which has the same eigenvalues but is symmetric.
    """
    if s1.mean.shape != s2.mean.shape:
        raise ShapeError(f"dimension mismatch: {s1.mean.shape[0]} vs {s2.mean.shape[0]}")
    root1 = _psd_sqrt(s1.cov, "first covariance")
    product = root1 @ s2.cov @ root1
    vals = np.linalg.eigvalsh(0.5 * (product + product.T))
    if vals.min(initial=0.0) < -NEG_EIG_TOL:
        raise NumericalError(f"covariance product has eigenvalue {vals.min():.3g} below -{NEG_EIG_TOL}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = s1.mean - s2.mean
    d2 = diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * tr_sqrt
    return float(max(d2, 0.0))


def foreground_iou(pred_mask, true_foreground, threshold: float = 0.5) -> float:
    p = np.asarray(pred_mask) >= threshold
    t = np.asarray(true_foreground) >= threshold
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def evaluate(preds: Sequence[np.ndarray], refs: Sequence[np.ndarray], backbone: Backbone) -> MetricReport:
    """Average SSIM / PSNR / perceptual distance over frame pairs, plus FID over the sets."""
    if len(preds) != len(refs) or not preds:
        raise ShapeError(f"need equal, nonzero frame counts (got {len(preds)} and {len(refs)})")
    ssims = [ssim(p, r) for p, r in zip(preds, refs)]
    psnrs = [psnr(p, r) for p, r in zip(preds, refs)]
    percs = [perceptual_distance(p, r, backbone) for p, r in zip(preds, refs)]
    finite = [v for v in psnrs if math.isfinite(v)]
    mean_psnr = float(np.mean(finite)) if len(finite) == len(psnrs) else PSNR_INF
    fid = None
    if len(preds) >= 2:
        fid = frechet_distance(fit_gaussian(embeddings(preds, backbone)),
                               fit_gaussian(embeddings(refs, backbone)))
    return MetricReport(float(np.mean(ssims)), mean_psnr, float(np.mean(percs)), fid,
                        len(preds), backbone.provenance)


__all__ = [
    "GaussianStats", "MetricReport", "psnr", "ssim", "ssim_map", "perceptual_distance",
    "fit_gaussian", "frechet_distance", "embeddings", "foreground_iou", "evaluate",
    "gaussian_window", "PSNR_INF",
]
