"""Alternating discriminator / generator training with exact resumption.

All randomness is drawn from generators keyed by ``(seed, step, role)``, so a
run resumed from any checkpoint replays the same noise and frame order as an
uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import archive
from .adversary import Discriminator, frozen, loss_d, loss_g, r1_penalty
from .backbones import BackboneSpec, build_surrogate
from .config import from_dict, to_dict, write_json
from .dataio import load_dataset, stack_batch
from .detail_loss import (DEFAULT_COS_TAPS, IdMrfConfig, LossBreakdown, LossWeights,
                          foreground_pair, generator_objective, loss_cos, loss_idmrf, loss_l1,
                          loss_mask, total_loss)
from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .generators import AvatarModel, GenConfig

log = logging.getLogger(__name__)

ROLES = {"init": 0, "noise": 1, "data": 2, "disc_init": 3}


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    betas: tuple = (0.0, 0.99)
    seed: int = 0
    use_mrf: bool = True
    use_cos: bool = True
    deterministic: bool = False
    checkpoint_every: int = 500
    r1_gamma: float = 1.0
    disc_base_channels: int = 16
    disc_max_channels: int = 64
    cos_taps: tuple = DEFAULT_COS_TAPS
    backbone_seed: int = 1234
    weights: LossWeights = field(default_factory=LossWeights)
    gen: GenConfig = field(default_factory=GenConfig)
    idmrf: IdMrfConfig = field(default_factory=IdMrfConfig)

    def validate(self) -> None:
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ConfigError(f"learning rates must be > 0, got lr_g={self.lr_g}, lr_d={self.lr_d}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"invalid betas {self.betas}")
        self.weights.validate()
        self.gen.validate()
        self.idmrf.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return from_dict(cls, data)


@dataclass
class StepRecord:
    step: int
    losses: LossBreakdown
    d_total: float
    r1: float
    wall_ms: float

    def to_json(self) -> dict:
        return {"step": self.step, **to_dict(self.losses), "d_total": self.d_total,
                "r1": self.r1, "wall_ms": self.wall_ms}


@dataclass
class CheckpointManifest:
    path: str
    step: int
    config: dict
    blobs: list
    content_hash: str


def counter_generator(seed: int, step: int, role: str) -> torch.Generator:
    """Fresh torch RNG keyed by (seed, step, role); independent of call history."""
    state = np.random.SeedSequence([seed, step, ROLES[role]]).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 32 | int(state[1]))
    return g


@contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic-kernel execution for bit-exact reruns."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    was_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(was_det)
        torch.set_num_threads(threads)


class TrainState:
    """Everything a training step mutates, plus the frozen backbone."""

    def __init__(self, cfg: TrainConfig, step: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.step = step
        init_seed = int(np.random.SeedSequence([cfg.seed, 0, ROLES["init"]]).generate_state(1)[0])
        disc_seed = int(np.random.SeedSequence([cfg.seed, 0, ROLES["disc_init"]]).generate_state(1)[0])
        self.model = AvatarModel(cfg.gen, seed=init_seed)
        self.disc = Discriminator(cfg.gen.resolution, cfg.disc_base_channels, cfg.disc_max_channels,
                                  seed=disc_seed)
        self.backbone = build_surrogate(BackboneSpec(seed=cfg.backbone_seed))
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_g, betas=tuple(cfg.betas), eps=1e-8)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_d, betas=tuple(cfg.betas), eps=1e-8)

    # -- serialization -------------------------------------------------
    def _opt_tensors(self, prefix: str, opt: torch.optim.Optimizer, module: torch.nn.Module) -> dict:
        out = {}
        for name, p in module.named_parameters():
            st = opt.state.get(p, {})
            out[f"{prefix}.{name}.step"] = st.get("step", torch.zeros(()))
            out[f"{prefix}.{name}.exp_avg"] = st.get("exp_avg", torch.zeros_like(p))
            out[f"{prefix}.{name}.exp_avg_sq"] = st.get("exp_avg_sq", torch.zeros_like(p))
        return out

    def named_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"disc.{k}": v for k, v in self.disc.state_dict().items()})
        tensors.update(self._opt_tensors("opt_g", self.opt_g, self.model))
        tensors.update(self._opt_tensors("opt_d", self.opt_d, self.disc))
        return tensors

    def content_hash(self) -> str:
        return archive.state_hash(self.named_tensors())

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        expected = {k: tuple(v.shape) for k, v in self.named_tensors().items()}
        got = {k: tuple(v.shape) for k, v in tensors.items()}
        if expected.keys() != got.keys():
            missing = sorted(expected.keys() - got.keys())[:3]
            extra = sorted(got.keys() - expected.keys())[:3]
            raise FormatError(f"checkpoint blobs do not match config (missing {missing}, unexpected {extra})")
        bad = [k for k in expected if expected[k] != got[k]]
        if bad:
            raise FormatError(f"checkpoint blob {bad[0]} has shape {got[bad[0]]}, config implies {expected[bad[0]]}")
        t = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
        self.model.load_state_dict({k[6:]: v for k, v in t.items() if k.startswith("model.")})
        self.disc.load_state_dict({k[5:]: v for k, v in t.items() if k.startswith("disc.")})
        for prefix, opt, module in (("opt_g", self.opt_g, self.model), ("opt_d", self.opt_d, self.disc)):
            for name, p in module.named_parameters():
                opt.state[p] = {
                    "step": t[f"{prefix}.{name}.step"].reshape(()),
                    "exp_avg": t[f"{prefix}.{name}.exp_avg"].clone(),
                    "exp_avg_sq": t[f"{prefix}.{name}.exp_avg_sq"].clone(),
                }

    def set_learning_rates(self, lr_g: float, lr_d: float) -> None:
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        for group in self.opt_d.param_groups:
            group["lr"] = lr_d


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> CheckpointManifest:
    meta = {"kind": "checkpoint", "config": to_dict(state.cfg), "step": state.step,
            "backbone": state.backbone.provenance}
    tensors = state.named_tensors()
    digest = archive.save(path, tensors, meta)
    _, manifest = archive.load(path)
    return CheckpointManifest(str(path), state.step, meta["config"], manifest["blobs"], digest)


def load_checkpoint(path: Union[str, Path], cfg: Optional[TrainConfig] = None) -> TrainState:
    """Restore a training state. ``cfg`` overrides the stored config (shapes must agree)."""
    tensors, manifest = archive.load(path)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} is not a training checkpoint")
    if cfg is None:
        try:
            cfg = TrainConfig.from_dict(meta["config"])
        except (ConfigError, KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint config unreadable: {exc}") from exc
    state = TrainState(cfg, step=int(meta["step"]))
    state.load_tensors(tensors)
    return state


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def _as_tensors(batch) -> dict[str, torch.Tensor]:
    if isinstance(batch, dict):
        return batch
    arrays = stack_batch(batch)
    return {k: torch.from_numpy(v) for k, v in arrays.items()}


def _check_finite(terms: dict[str, torch.Tensor], step: int) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericalError(f"non-finite loss term {name!r} at step {step}: {value.item()}")


def d_update(state: TrainState, real: torch.Tensor, fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """One discriminator step on real frames vs detached generated frames."""
    cfg = state.cfg
    real = real.detach().clone().requires_grad_(True)
    real_logits = state.disc(real)
    fake_logits = state.disc(fake.detach())
    r1 = r1_penalty(real_logits, real)
    d = loss_d(real_logits, fake_logits, r1, cfg.r1_gamma)
    _check_finite({"d": d}, state.step + 1)
    state.opt_d.zero_grad(set_to_none=True)
    (cfg.weights.d * d).backward()
    state.opt_d.step()
    return d.detach(), r1.detach()


def generator_terms(state: TrainState, out, real: torch.Tensor, background: torch.Tensor) -> dict[str, torch.Tensor]:
    cfg = state.cfg
    terms = {
        "mask": loss_mask(out.mask, background),
        "l1": loss_l1(out.avatar, real),
    }
    if cfg.use_mrf:
        fake_fg, real_fg = foreground_pair(out.mask, out.avatar, background, real)
        terms["mrf"] = loss_idmrf(fake_fg, real_fg, state.backbone, cfg.idmrf)
    if cfg.use_cos:
        terms["cos"] = loss_cos(out.avatar, real, state.backbone, cfg.cos_taps)
    with frozen(state.disc):
        terms["g"] = loss_g(state.disc(out.avatar))
    return terms


def train_step(state: TrainState, batch) -> tuple[TrainState, StepRecord]:
    """One D update then one G update. Mutates and returns ``state``."""
    t0 = time.perf_counter()
    cfg = state.cfg
    data = _as_tensors(batch)
    R = cfg.gen.resolution
    if tuple(data["render"].shape[-2:]) != (R, R):
        raise ShapeError(f"batch resolution {tuple(data['render'].shape[-2:])} != config {R}")
    k = state.step + 1
    state.model.train()
    noise = state.model.sample_noise(counter_generator(cfg.seed, k, "noise"))
    out = state.model(data["render"], data["uv"], noise)

    d_value, r1 = d_update(state, data["real"], out.avatar)

    terms = generator_terms(state, out, data["real"], data["mask"])
    _check_finite(terms, k)
    objective = generator_objective(terms, cfg.weights)
    state.opt_g.zero_grad(set_to_none=True)
    objective.backward()
    state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)
    state.step = k

    breakdown = LossBreakdown(**{name: v.item() for name, v in terms.items()}, d=d_value.item())
    breakdown.total, d_total = total_loss(breakdown, cfg.weights)
    record = StepRecord(k, breakdown, d_total, float(r1), (time.perf_counter() - t0) * 1000.0)
    return state, record


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def batch_indices(seed: int, step: int, batch_size: int, n_frames: int) -> list[int]:
    """Frame indices for ``step`` (1-based): epoch-wise permutations keyed by epoch."""
    out = []
    perms = {}
    for j in range(batch_size):
        g = (step - 1) * batch_size + j
        epoch = g // n_frames
        if epoch not in perms:
            perms[epoch] = torch.randperm(n_frames, generator=counter_generator(seed, epoch, "data"))
        out.append(int(perms[epoch][g % n_frames]))
    return out


def _dataset_tensors(dataset) -> dict[str, torch.Tensor]:
    if isinstance(dataset, (str, Path)):
        _, samples = load_dataset(dataset)
    elif isinstance(dataset, tuple):
        samples = dataset[1]
    else:
        samples = dataset
    if not samples:
        raise ConfigError("dataset has no frames")
    return _as_tensors(samples)


def train(dataset, cfg: TrainConfig, out: Union[str, Path], resume_from: Optional[Union[str, Path]] = None,
          callback=None) -> CheckpointManifest:
    """Train for ``cfg.steps`` total steps, checkpointing into ``out/checkpoints``.

    ``dataset`` is a directory, a ``(manifest, samples)`` pair or a sample list.
    """
    cfg.validate()
    out = Path(out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_json(out / "train-config.json", cfg)
    data = _dataset_tensors(dataset)
    n = data["real"].shape[0]
    if data["real"].shape[-1] != cfg.gen.resolution:
        raise ShapeError(f"dataset resolution {data['real'].shape[-1]} != gen.resolution {cfg.gen.resolution}")

    with deterministic_mode(cfg.deterministic):
        state = load_checkpoint(resume_from, cfg) if resume_from else TrainState(cfg)
        manifest = None
        with open(out / "steps.jsonl", "a", encoding="utf-8") as steplog:
            while state.step < cfg.steps:
                idx = batch_indices(cfg.seed, state.step + 1, cfg.batch_size, n)
                batch = {k: v[idx] for k, v in data.items()}
                state, record = train_step(state, batch)
                steplog.write(json.dumps(record.to_json()) + "\n")
                if callback is not None:
                    callback(state, record)
                if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                    manifest = save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.ckpt")
                    steplog.flush()
                    log.info("step %d: generator total %.4f", state.step, record.losses.total)
    if manifest is None:
        manifest = save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.ckpt")
    return manifest


def read_step_log(path: Union[str, Path]) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


__all__ = [
    "TrainConfig", "TrainState", "StepRecord", "CheckpointManifest", "train", "train_step",
    "save_checkpoint", "load_checkpoint", "counter_generator", "deterministic_mode",
    "batch_indices", "read_step_log", "d_update", "generator_terms",
]
