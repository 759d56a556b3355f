import pytest
import torch

from headavatar import archive
from headavatar.backbones import BackboneSpec, build_surrogate, extract_features, load_backbone, save_backbone
from headavatar.errors import ConfigError, FormatError, ShapeError
from oracles import analytic_gradient, central_difference, relative_error

SMALL = BackboneSpec(stages=((8, 2), (16, 2)), tap_layers=(0, 1))


def test_same_spec_same_outputs():
    x = torch.rand(2, 3, 32, 32)
    a, b = build_surrogate(SMALL).extract(x), build_surrogate(SMALL).extract(x)
    for t in SMALL.tap_layers:
        assert torch.equal(a[t], b[t])
    assert a.provenance == b.provenance


def test_tap_shapes_follow_strides():
    f = extract_features(build_surrogate(SMALL), torch.rand(1, 3, 32, 32))
    assert tuple(f[0].shape) == (1, 8, 16, 16)
    assert tuple(f[1].shape) == (1, 16, 8, 8)


def test_seeds_change_outputs():
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(5))
    a = build_surrogate(BackboneSpec(seed=1)).extract(x)
    b = build_surrogate(BackboneSpec(seed=2)).extract(x)
    assert not torch.allclose(a[3], b[3])


def test_weight_statistics_follow_fan_in():
    bb = build_surrogate()
    w = bb.stage2_weight
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert abs(w.var().item() * fan_in - 1.0) < 0.05
    assert torch.count_nonzero(bb.stage2_bias) == 0


def test_zero_images_give_identical_pyramids(backbone):
    a = backbone.extract(torch.zeros(1, 3, 32, 32))
    b = backbone.extract(torch.zeros(1, 3, 32, 32))
    for t in backbone.spec.tap_layers:
        assert torch.equal(a[t], b[t])


def test_nonlinearity_is_present(backbone):
    x = torch.rand(1, 3, 32, 32)
    a, b = backbone.extract(x), backbone.extract(2 * x)
    # with the [-1, 1] mapping, a linear net would give exactly 2a + const; check it is not affine
    a0, b0 = backbone.extract(torch.zeros_like(x)), backbone.extract(torch.zeros_like(x))
    assert not torch.allclose(b[2] - b0[2], 2 * (a[2] - a0[2]), atol=1e-4)


def test_too_small_image_is_shape_error(backbone):
    with pytest.raises(ShapeError):
        backbone.extract(torch.zeros(1, 3, 8, 8))


def test_frozen(backbone):
    assert all(not p.requires_grad for p in backbone.parameters())
    assert all(not b.requires_grad for b in backbone.buffers())


@pytest.mark.parametrize("spec,size", [(SMALL, 8), (BackboneSpec(), 16)])
def test_input_gradient_matches_finite_differences(spec, size):
    bb = build_surrogate(spec)
    gen = torch.Generator().manual_seed(11)
    for tap in spec.tap_layers:
        x = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64)
        proj = torch.randn(bb.extract(x)[tap].shape, generator=gen, dtype=torch.float64)
        f = lambda im: (bb.extract(im)[tap] * proj).sum()  # noqa: E731
        assert relative_error(analytic_gradient(f, x), central_difference(f, x)) <= 1e-3


def test_save_load_round_trip(tmp_path):
    bb = build_surrogate(SMALL)
    save_backbone(bb, tmp_path / "bb.bin")
    loaded = load_backbone(tmp_path / "bb.bin")
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(bb.extract(x)[1], loaded.extract(x)[1])
    assert loaded.provenance == bb.provenance


def test_truncated_archive_is_format_error(tmp_path):
    save_backbone(build_surrogate(SMALL), tmp_path / "bb.bin")
    raw = (tmp_path / "bb.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_backbone(tmp_path / "cut.bin")


def test_wrong_stage_count_is_format_error(tmp_path):
    save_backbone(build_surrogate(SMALL), tmp_path / "bb.bin")
    with pytest.raises(FormatError):
        load_backbone(tmp_path / "bb.bin", spec=BackboneSpec())
    # archive whose blobs disagree with its own declared stages
    tensors, manifest = archive.load(tmp_path / "bb.bin")
    del tensors["stage1_weight"], tensors["stage1_bias"]
    archive.save(tmp_path / "short.bin", tensors, manifest["meta"])
    with pytest.raises(FormatError):
        load_backbone(tmp_path / "short.bin")


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        build_surrogate(BackboneSpec(stages=((8, 3),)))
    with pytest.raises(ConfigError):
        build_surrogate(BackboneSpec(stages=((8, 2),), tap_layers=(1,)))
    with pytest.raises(ConfigError):
        build_surrogate(BackboneSpec(stages=()))
