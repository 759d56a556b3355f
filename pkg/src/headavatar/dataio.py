"""Tracked-frame datasets: on-disk layout, loading, validation and synthesis.

A dataset directory holds ``manifest.json`` and one PNG quadruple per frame::

    frames/000000_real.png    RGB, the captured frame
    frames/000000_render.png  RGB, flat render of the tracked face model
    frames/000000_uv.png      RGB, (u, v, validity)
    frames/000000_mask.png    L,   1 = background

Any external face tracker can be adapted by writing this layout. Pixel values
map linearly between [0, 1] and [0, 255].
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .config import is_power_of_two, to_dict
from .errors import ConfigError, FormatError, IntegrityError

KINDS = ("real", "render", "uv", "mask")
MANIFEST_NAME = "manifest.json"
FRAME_DIR = "frames"


@dataclass
class FrameSample:
    """One tracked frame. Images are float32 H x W x 3, the mask H x W."""

    frame_id: int
    real_image: Optional[np.ndarray]
    render_image: np.ndarray
    uv_image: np.ndarray
    background_mask: Optional[np.ndarray]

    @property
    def resolution(self) -> int:
        return self.render_image.shape[0]

    @property
    def foreground(self) -> np.ndarray:
        return 1.0 - self.background_mask


@dataclass
class DatasetManifest:
    resolution: int
    frame_count: int
    fps: float = 30.0
    identity_tag: str = ""
    seed: Optional[int] = None
    synth: Optional[dict] = None

    def validate(self) -> None:
        if not is_power_of_two(self.resolution) or not 32 <= self.resolution <= 512:
            raise FormatError(f"resolution must be a power of two in [32, 512], got {self.resolution}")
        if not isinstance(self.frame_count, int) or self.frame_count < 0:
            raise FormatError(f"invalid frame_count {self.frame_count!r}")


@dataclass
class SynthConfig:
    seed: int = 0
    resolution: int = 64
    frame_count: int = 200
    motion_amplitude: float = 0.35
    texture_frequency: float = 6.0
    # Fractional frame offset for the pose trajectory; lets a second clip of
    # the same identity sample poses in between those of the first.
    time_offset: float = 0.0
    fps: float = 30.0

    def validate(self) -> None:
        if self.frame_count < 2:
            raise ConfigError(f"frame_count must be >= 2, got {self.frame_count}")
        if not is_power_of_two(self.resolution):
            raise ConfigError(f"resolution must be a power of two, got {self.resolution}")


def frame_path(root: Path, frame_id: int, kind: str) -> Path:
    return Path(root) / FRAME_DIR / f"{frame_id:06d}_{kind}.png"


# ---------------------------------------------------------------------------
# raster io
# ---------------------------------------------------------------------------

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def save_gray(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")


def read_raster(path: Path, channels: int) -> np.ndarray:
    """Read a PNG as float32 in [0, 1]; 16-bit files are checked against the 8-bit range."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "F"):
                raw = np.asarray(im, dtype=np.float64)
                if raw.min() < 0 or raw.max() > 255:
                    raise IntegrityError(
                        f"{path.name}: stored values outside [0, 1] "
                        f"(max {raw.max() / 255:.3f})")
                arr = raw / 255.0
                if channels == 3:
                    arr = np.repeat(arr[..., None], 3, axis=-1)
                return arr.astype(np.float32)
            im = im.convert("RGB" if channels == 3 else "L")
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_sample(s: FrameSample) -> list[str]:
    """Return every violated FrameSample invariant; an empty list means valid."""
    problems = []
    rasters = {
        "real_image": s.real_image,
        "render_image": s.render_image,
        "uv_image": s.uv_image,
        "background_mask": s.background_mask,
    }
    shapes = {k: v.shape[:2] for k, v in rasters.items() if v is not None}
    if len(set(shapes.values())) > 1:
        problems.append(f"raster sizes differ: {shapes}")
    for name, arr in rasters.items():
        if arr is None:
            continue
        expected_ndim = 2 if name == "background_mask" else 3
        if arr.ndim != expected_ndim or (expected_ndim == 3 and arr.shape[2] != 3):
            problems.append(f"{name} has shape {arr.shape}")
            continue
        if not np.all(np.isfinite(arr)):
            problems.append(f"{name} has non-finite values")
        elif arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            problems.append(f"{name} values outside [0, 1] "
                            f"(min {arr.min():.3f}, max {arr.max():.3f})")
    render, uv = s.render_image, s.uv_image
    if render.ndim == 3 and uv.ndim == 3 and render.shape[:2] == uv.shape[:2]:
        bg_colored = np.all(render == 0.0, axis=-1)
        valid = uv[..., 2] != 0.0
        if np.any(valid & bg_colored):
            problems.append("uv validity channel nonzero on background-colored render pixels")
        if np.any(~valid & ~bg_colored):
            problems.append("uv validity channel zero on foreground render pixels")
    return problems


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def read_manifest(path: str | Path) -> DatasetManifest:
    mpath = Path(path) / MANIFEST_NAME
    if not mpath.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {path}")
    try:
        with open(mpath, "r", encoding="utf-8") as f:
            data = json.load(f)
        manifest = DatasetManifest(**data)
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"malformed manifest {mpath}: {exc}") from exc
    manifest.validate()
    return manifest


def _load_frame(root: Path, frame_id: int, resolution: int, optional: Sequence[str]) -> FrameSample:
    rasters = {}
    for kind in KINDS:
        p = frame_path(root, frame_id, kind)
        if not p.is_file():
            if kind in optional:
                rasters[kind] = None
                continue
            raise IntegrityError(f"frame {frame_id}: missing {kind} raster ({p.name})")
        rasters[kind] = read_raster(p, 1 if kind == "mask" else 3)
        if rasters[kind].shape[:2] != (resolution, resolution):
            raise IntegrityError(
                f"frame {frame_id}: {kind} is {rasters[kind].shape[:2]}, "
                f"manifest says {resolution}x{resolution}")
    sample = FrameSample(frame_id, rasters["real"], rasters["render"], rasters["uv"], rasters["mask"])
    problems = validate_sample(sample)
    if problems:
        raise IntegrityError(f"frame {frame_id}: " + "; ".join(problems))
    return sample


def load_dataset(path: str | Path, *, optional: Sequence[str] = (),
                 workers: int = 1) -> tuple[DatasetManifest, list[FrameSample]]:
    """Load and validate a dataset directory.

    ``optional`` names raster kinds that may be absent (e.g. ``("real", "mask")``
    for a cross-identity driving clip); absent rasters come back as ``None``.
    """
    root = Path(path)
    manifest = read_manifest(root)
    unknown = set(optional) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown raster kinds {sorted(unknown)}")
    frame_dir = root / FRAME_DIR
    on_disk = set()
    if frame_dir.is_dir():
        for name in os.listdir(frame_dir):
            stem = name.split("_", 1)[0]
            if stem.isdigit():
                on_disk.add(int(stem))
    expected = set(range(manifest.frame_count))
    if on_disk - expected:
        raise IntegrityError(
            f"frames on disk beyond manifest frame_count={manifest.frame_count}: "
            f"{sorted(on_disk - expected)[:5]}")

    def load(i):
        return _load_frame(root, i, manifest.resolution, optional)

    ids = range(manifest.frame_count)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(load, ids))
    else:
        samples = [load(i) for i in ids]
    return manifest, samples


def write_dataset(out: str | Path, manifest: DatasetManifest, samples: Sequence[FrameSample]) -> None:
    root = Path(out)
    (root / FRAME_DIR).mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.real_image is not None:
            save_rgb(frame_path(root, s.frame_id, "real"), s.real_image)
        save_rgb(frame_path(root, s.frame_id, "render"), s.render_image)
        save_rgb(frame_path(root, s.frame_id, "uv"), s.uv_image)
        if s.background_mask is not None:
            save_gray(frame_path(root, s.frame_id, "mask"), s.background_mask)
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(to_dict(manifest), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

HEAD_CENTER = (0.5, 0.42)
HEAD_AXES = (0.2, 0.27)
SHOULDER_BOX = (0.18, 0.66, 0.82, 1.0)  # x0, y0, x1, y1


class _Identity:
    """Per-seed appearance: colors, stripe phase and background plate."""

    def __init__(self, seed: int, resolution: int):
        rng = np.random.default_rng(seed)
        self.skin = np.array([0.78, 0.58, 0.48]) + rng.uniform(-0.06, 0.06, 3)
        self.shoulder = rng.uniform(0.15, 0.55, 3)
        self.stripe_phase = rng.uniform(0, 2 * np.pi)
        self.stripe_amp = 0.16
        yy, xx = _grid(resolution)
        bg = np.zeros((resolution, resolution, 3))
        for _ in range(4):
            freq = rng.uniform(3.0, 8.0)
            angle = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            color = rng.uniform(-0.12, 0.12, 3)
            wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
            bg += wave[..., None] * color
        self.background = np.clip(bg + rng.uniform(0.3, 0.6, 3), 0.0, 1.0)


def _grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(resolution) + 0.5) / resolution
    return np.meshgrid(c, c, indexing="ij")


def head_pose(cfg: SynthConfig, t: int) -> float:
    return cfg.motion_amplitude * math.sin(2 * math.pi * (t + cfg.time_offset) / cfg.frame_count)


def render_frame(cfg: SynthConfig, ident: _Identity, t: int) -> FrameSample:
    R = cfg.resolution
    yy, xx = _grid(R)
    theta = head_pose(cfg, t)
    dx, dy = xx - HEAD_CENTER[0], yy - HEAD_CENTER[1]
    c, s = math.cos(theta), math.sin(theta)
    xl = c * dx + s * dy
    yl = -s * dx + c * dy
    a, b = HEAD_AXES
    head = (xl / a) ** 2 + (yl / b) ** 2 <= 1.0
    x0, y0, x1, y1 = SHOULDER_BOX
    shoulders = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    u = np.clip((xl / a + 1) / 2, 0.0, 1.0)
    v = np.clip((yl / b + 1) / 2, 0.0, 1.0)

    render = np.zeros((R, R, 3))
    render[head] = ident.skin
    uv = np.zeros((R, R, 3))
    uv[..., 0] = np.where(head, u, 0.0)
    uv[..., 1] = np.where(head, v, 0.0)
    uv[..., 2] = head.astype(np.float64)

    stripes = ident.stripe_amp * np.sin(2 * np.pi * cfg.texture_frequency * u + ident.stripe_phase)
    real = ident.background.copy()
    shade = 0.85 + 0.15 * (1 - yy)
    real[shoulders] = (ident.shoulder * shade[..., None])[shoulders]
    real[head] = (ident.skin + stripes[..., None])[head]
    mask = (~(head | shoulders)).astype(np.float64)

    q = lambda x: np.round(np.clip(x, 0, 1) * 255.0) / 255.0  # noqa: E731
    return FrameSample(
        frame_id=t,
        real_image=q(real).astype(np.float32),
        render_image=q(render).astype(np.float32),
        uv_image=q(uv).astype(np.float32),
        background_mask=mask.astype(np.float32),
    )


def synthesize_frames(cfg: SynthConfig) -> list[FrameSample]:
    cfg.validate()
    ident = _Identity(cfg.seed, cfg.resolution)
    return [render_frame(cfg, ident, t) for t in range(cfg.frame_count)]


def synthesize_dataset(cfg: SynthConfig, out: str | Path) -> DatasetManifest:
    """Write a procedurally generated clip with exact ground truth to ``out``."""
    cfg.validate()
    manifest = DatasetManifest(
        resolution=cfg.resolution,
        frame_count=cfg.frame_count,
        fps=cfg.fps,
        identity_tag=f"synth-{cfg.seed}",
        seed=cfg.seed,
        synth=to_dict(cfg),
    )
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        write_dataset(root, manifest, synthesize_frames(cfg))
    except PermissionError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    return manifest


def stack_batch(samples: Sequence[FrameSample], kinds: Sequence[str] = KINDS) -> dict[str, np.ndarray]:
    """Stack samples into N x C x H x W float32 arrays keyed by raster kind."""
    attr = {"real": "real_image", "render": "render_image", "uv": "uv_image", "mask": "background_mask"}
    out = {}
    for kind in kinds:
        arrs = [getattr(s, attr[kind]) for s in samples]
        arr = np.stack(arrs).astype(np.float32)
        out[kind] = arr[:, None] if arr.ndim == 3 else arr.transpose(0, 3, 1, 2)
    return out


__all__ = [
    "FrameSample", "DatasetManifest", "SynthConfig", "load_dataset", "synthesize_dataset",
    "synthesize_frames", "validate_sample", "write_dataset", "stack_batch", "read_manifest",
    "frame_path", "save_rgb", "save_gray", "read_raster",
]
