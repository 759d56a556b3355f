import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from headavatar.dataio import (HEAD_AXES, HEAD_CENTER, SHOULDER_BOX, FrameSample, SynthConfig, frame_path,
                               head_pose, load_dataset, read_manifest, stack_batch, synthesize_dataset,
                               synthesize_frames, validate_sample)
from headavatar.errors import ConfigError, FormatError, IntegrityError


def test_round_trip_matches_config(tmp_path):
    cfg = SynthConfig(seed=7, resolution=32, frame_count=6, motion_amplitude=0.2)
    written = synthesize_dataset(cfg, tmp_path)
    manifest, samples = load_dataset(tmp_path)
    assert manifest == written
    assert manifest.resolution == cfg.resolution
    assert manifest.frame_count == cfg.frame_count == len(samples)
    assert manifest.seed == cfg.seed
    assert manifest.synth["motion_amplitude"] == cfg.motion_amplitude
    assert [s.frame_id for s in samples] == list(range(cfg.frame_count))


def test_round_trip_within_quantization(tmp_path):
    cfg = SynthConfig(seed=2, resolution=32, frame_count=3)
    synthesize_dataset(cfg, tmp_path)
    _, loaded = load_dataset(tmp_path)
    for a, b in zip(synthesize_frames(cfg), loaded):
        for attr in ("real_image", "render_image", "uv_image", "background_mask"):
            assert np.max(np.abs(getattr(a, attr) - getattr(b, attr))) <= 1 / 255 + 1e-7


def test_same_config_is_byte_identical(tmp_path):
    cfg = SynthConfig(seed=5, resolution=32, frame_count=3)
    synthesize_dataset(cfg, tmp_path / "a")
    synthesize_dataset(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_zero_motion_gives_identical_renders():
    frames = synthesize_frames(SynthConfig(resolution=32, frame_count=5, motion_amplitude=0.0))
    for f in frames[1:]:
        np.testing.assert_array_equal(f.render_image, frames[0].render_image)


def test_frame_count_on_disk(tmp_path):
    synthesize_dataset(SynthConfig(resolution=64, frame_count=8), tmp_path)
    files = sorted((tmp_path / "frames").glob("*.png"))
    assert len(files) == 32
    for p in files:
        with Image.open(p) as im:
            assert im.size == (64, 64)


def test_empty_directory_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_missing_raster_is_integrity_error(tiny_dataset, tmp_path):
    copy = tmp_path / "d"
    shutil.copytree(tiny_dataset, copy)
    frame_path(copy, 3, "uv").unlink()
    with pytest.raises(IntegrityError, match="frame 3"):
        load_dataset(copy)


def test_out_of_range_mask_is_integrity_error(tiny_dataset, tmp_path):
    copy = tmp_path / "d"
    shutil.copytree(tiny_dataset, copy)
    # 16-bit PNG holding 1.2 on the 8-bit scale
    raw = np.full((32, 32), int(round(1.2 * 255)), dtype=np.uint16)
    Image.fromarray(raw).save(frame_path(copy, 0, "mask"))
    with pytest.raises(IntegrityError):
        load_dataset(copy)


def test_resolution_mismatch_is_integrity_error(tiny_dataset, tmp_path):
    copy = tmp_path / "d"
    shutil.copytree(tiny_dataset, copy)
    Image.new("RGB", (16, 16)).save(frame_path(copy, 1, "render"))
    with pytest.raises(IntegrityError):
        load_dataset(copy)


def test_frame_count_must_match_disk(tiny_dataset, tmp_path):
    copy = tmp_path / "d"
    shutil.copytree(tiny_dataset, copy)
    m = json.loads((copy / "manifest.json").read_text())
    m["frame_count"] = 5
    (copy / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(IntegrityError):
        load_dataset(copy)


def test_bad_manifest_resolution(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"resolution": 48, "frame_count": 0}))
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_parallel_load_matches_serial(tiny_dataset):
    _, a = load_dataset(tiny_dataset)
    _, b = load_dataset(tiny_dataset, workers=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.real_image, y.real_image)


def test_valid_sample_has_empty_report():
    for s in synthesize_frames(SynthConfig(resolution=32, frame_count=4)):
        assert validate_sample(s) == []


def test_uv_on_background_is_one_violation():
    s = synthesize_frames(SynthConfig(resolution=32, frame_count=2))[0]
    bg = np.all(s.render_image == 0, axis=-1)
    uv = s.uv_image.copy()
    uv[np.argwhere(bg)[0][0], np.argwhere(bg)[0][1], 2] = 1.0
    report = validate_sample(FrameSample(0, s.real_image, s.render_image, uv, s.background_mask))
    assert len(report) == 1 and "validity" in report[0]


def test_mismatched_sizes_is_one_violation():
    s = synthesize_frames(SynthConfig(resolution=32, frame_count=2))[0]
    report = validate_sample(FrameSample(0, np.zeros((16, 16, 3), np.float32), s.render_image,
                                         s.uv_image, s.background_mask))
    assert len(report) == 1 and "sizes" in report[0]


def test_synth_config_invariants():
    with pytest.raises(ConfigError):
        SynthConfig(frame_count=1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(resolution=48).validate()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(0, 7), amp=st.floats(0.0, 0.6))
def test_foreground_is_union_of_shapes(seed, t, amp):
    cfg = SynthConfig(seed=seed, resolution=32, frame_count=8, motion_amplitude=amp)
    s = synthesize_frames(cfg)[t]
    theta = head_pose(cfg, t)
    R = cfg.resolution
    expected = np.zeros((R, R))
    for i in range(R):
        for j in range(R):
            y, x = (i + 0.5) / R, (j + 0.5) / R
            dx, dy = x - HEAD_CENTER[0], y - HEAD_CENTER[1]
            xl = math.cos(theta) * dx + math.sin(theta) * dy
            yl = -math.sin(theta) * dx + math.cos(theta) * dy
            in_head = (xl / HEAD_AXES[0]) ** 2 + (yl / HEAD_AXES[1]) ** 2 <= 1.0
            x0, y0, x1, y1 = SHOULDER_BOX
            in_shoulders = x0 <= x <= x1 and y0 <= y <= y1
            expected[i, j] = 1.0 if (in_head or in_shoulders) else 0.0
    np.testing.assert_array_equal(1.0 - s.background_mask, expected)


def test_stack_batch_layout():
    frames = synthesize_frames(SynthConfig(resolution=32, frame_count=3))
    batch = stack_batch(frames)
    assert batch["real"].shape == (3, 3, 32, 32)
    assert batch["mask"].shape == (3, 1, 32, 32)
    np.testing.assert_array_equal(batch["uv"][1].transpose(1, 2, 0), frames[1].uv_image)
