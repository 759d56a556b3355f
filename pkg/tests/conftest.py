import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from headavatar.backbones import build_surrogate  # noqa: E402
from headavatar.dataio import SynthConfig, synthesize_dataset  # noqa: E402
from headavatar.generators import GenConfig  # noqa: E402
from headavatar.trainer import TrainConfig  # noqa: E402

# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def backbone():
    return build_surrogate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "data"
    synthesize_dataset(SynthConfig(seed=3, resolution=32, frame_count=8), out)
    return out


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(steps=2, batch_size=2, deterministic=True, checkpoint_every=1,
                disc_base_channels=8, disc_max_channels=16,
                gen=GenConfig(resolution=32, latent_dim=16, base_channels=8, max_channels=16))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_train_config


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
