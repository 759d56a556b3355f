import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from headavatar.adversary import Discriminator, disc_score, frozen, loss_d, loss_g, r1_penalty
from headavatar.errors import ShapeError
from oracles import analytic_gradient, central_difference, relative_error

logits = st.lists(st.floats(-20, 20), min_size=1, max_size=6)


def test_loss_g_examples():
    assert loss_g(torch.tensor([0.0])).item() == pytest.approx(math.log(2), abs=1e-7)
    assert loss_g(torch.tensor([10.0])).item() == pytest.approx(4.54e-5, rel=1e-3)


def test_loss_d_examples():
    z = torch.tensor([0.0])
    assert loss_d(torch.tensor([10.0]), torch.tensor([-10.0]), 0.0).item() == pytest.approx(9.08e-5, rel=1e-3)
    assert loss_d(z, z, 0.0).item() == pytest.approx(2 * math.log(2), abs=1e-7)
    assert loss_d(z, z, torch.tensor(4.0), gamma=1.0).item() - loss_d(z, z, 0.0).item() == pytest.approx(2.0)


@settings(max_examples=50, deadline=None)
@given(logits, st.floats(-5, 5))
def test_loss_g_monotone_and_translation_sensitive(values, c):
    x = torch.tensor(values, dtype=torch.float64)
    assert loss_g(x).item() >= 0
    if c > 1e-3:
        assert loss_g(x + c).item() < loss_g(x).item()


@settings(max_examples=50, deadline=None)
@given(logits, logits)
def test_loss_d_swap_symmetry(real, fake):
    r = torch.tensor(real, dtype=torch.float64)
    f = torch.tensor(fake, dtype=torch.float64)
    assert loss_d(r, f, 0.0).item() >= 0
    assert loss_d(r, f, 0.0).item() == pytest.approx(loss_d(-f, -r, 0.0).item(), rel=1e-12, abs=1e-12)


def test_loss_d_translation_sensitive():
    r, f = torch.tensor([0.3, -1.0]), torch.tensor([0.5, 2.0])
    assert loss_d(r + 1.0, f + 1.0, 0.0).item() != pytest.approx(loss_d(r, f, 0.0).item())


def test_disc_shape_and_determinism():
    d = Discriminator(32, base_channels=8, max_channels=16, seed=3)
    x = torch.rand(5, 3, 32, 32)
    a, b = disc_score(d, x), disc_score(d, x)
    assert a.shape == (5,) and torch.equal(a, b) and torch.isfinite(a).all()


def test_disc_resolution_mismatch():
    with pytest.raises(ShapeError):
        Discriminator(32, 8, 16)(torch.rand(1, 3, 16, 16))


def test_disc_input_gradient_matches_finite_differences():
    d = Discriminator(16, base_channels=8, max_channels=16, seed=1).double()
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    f = lambda im: d(im).sum()  # noqa: E731
    assert relative_error(analytic_gradient(f, x), central_difference(f, x)) <= 1e-3


def test_r1_zero_for_constant_discriminator():
    d = Discriminator(16, 8, 16)
    with torch.no_grad():
        d.out.weight.zero_()
    x = torch.rand(3, 3, 16, 16, requires_grad=True)
    assert r1_penalty(d(x), x).item() == 0.0


def test_r1_matches_per_sample_gradient_norm():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 4, 4, dtype=torch.float64)
    out = (x * w).flatten(1).sum(1)
    expected = (w ** 2).sum().item()  # identical gradient for every sample
    assert r1_penalty(out, x).item() == pytest.approx(expected, rel=1e-12)


def test_frozen_restores_flags():
    d = Discriminator(16, 8, 16)
    with frozen(d):
        assert not any(p.requires_grad for p in d.parameters())
    assert all(p.requires_grad for p in d.parameters())
