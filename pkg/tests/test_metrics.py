import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from headavatar.errors import DegenerateInputError, NumericalError, ShapeError
from headavatar.metrics import (PSNR_INF, GaussianStats, MetricReport, evaluate, fit_gaussian, foreground_iou,
                                frechet_distance, perceptual_distance, psnr, ssim)
from oracles import frechet_mpmath, psnr_loops, ssim_loops

C1, C2 = 0.01 ** 2, 0.03 ** 2


def _random_stats(rng, d):
    a = rng.standard_normal((d, d))
    return GaussianStats(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))


def test_psnr_examples(rng):
    a = rng.random((16, 16, 3))
    assert psnr(a, a) == PSNR_INF
    b = np.clip(a, 0, 0.9)
    assert psnr(b, b + 0.1) == pytest.approx(20.0, abs=1e-6)
    c = rng.random((16, 16, 3))
    assert abs(psnr(a, c) - psnr_loops(a, c)) <= 1e-6


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identity_is_exactly_one(rng):
    for _ in range(5):
        a = rng.random((24, 20, 3))
        assert ssim(a, a) == 1.0


def test_ssim_binary_inverse_is_negative(rng):
    a = (rng.random((32, 32, 1)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16, 3), 0.3), np.full((16, 16, 3), 0.7)
    expected = (2 * 0.3 * 0.7 + C1) / (0.09 + 0.49 + C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_loop_oracle(rng):
    a, b = rng.random((14, 13, 2)), rng.random((14, 13, 2))
    assert ssim(a, b) == pytest.approx(ssim_loops(a, b), abs=1e-10)


def test_ssim_small_image():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.permutations([0, 1, 2]))
def test_ssim_channel_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(a[..., perm], b[..., perm]) == pytest.approx(ssim(a, b), abs=1e-12)


def _perceptual_loops(a, b, backbone):
    fa = backbone.extract(torch.from_numpy(a.transpose(2, 0, 1)[None].astype(np.float32)))
    fb = backbone.extract(torch.from_numpy(b.transpose(2, 0, 1)[None].astype(np.float32)))
    total = 0.0
    for t in backbone.spec.tap_layers:
        x, y = fa[t][0].double().numpy(), fb[t][0].double().numpy()
        C, H, W = x.shape
        acc = 0.0
        for i in range(H):
            for j in range(W):
                nx = math.sqrt(sum(x[c, i, j] ** 2 for c in range(C))) + 1e-10
                ny = math.sqrt(sum(y[c, i, j] ** 2 for c in range(C))) + 1e-10
                acc += sum((x[c, i, j] / nx - y[c, i, j] / ny) ** 2 for c in range(C))
        total += acc / (C * H * W)
    return total


def test_perceptual_examples(rng, backbone):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert perceptual_distance(a, a, backbone) == 0.0
    assert perceptual_distance(a, b, backbone) == pytest.approx(perceptual_distance(b, a, backbone), abs=1e-9)
    assert perceptual_distance(a, b, backbone) == pytest.approx(_perceptual_loops(a, b, backbone), abs=1e-6)


def test_fit_gaussian_examples(rng):
    s = fit_gaussian([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(s.mean, [1.0, 0.0])
    np.testing.assert_allclose(s.cov, [[2.0, 0.0], [0.0, 0.0]])
    x = rng.standard_normal((30, 4))
    again = fit_gaussian(x.copy())
    first = fit_gaussian(x)
    np.testing.assert_array_equal(first.mean, again.mean)
    np.testing.assert_array_equal(first.cov, again.cov)
    # two-pass naive estimator
    n, d = x.shape
    mean = [sum(x[i, k] for i in range(n)) / n for k in range(d)]
    cov = [[sum((x[i, p] - mean[p]) * (x[i, q] - mean[q]) for i in range(n)) / (n - 1) for q in range(d)]
           for p in range(d)]
    np.testing.assert_allclose(first.mean, mean, atol=1e-10)
    np.testing.assert_allclose(first.cov, cov, atol=1e-10)


def test_fit_gaussian_needs_two():
    with pytest.raises(DegenerateInputError):
        fit_gaussian([[1.0, 2.0]])


def test_gaussian_stats_symmetry_checked():
    with pytest.raises(ShapeError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_frechet_examples(rng):
    assert abs(frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[1.0]])) - 1.0) <= 1e-6
    for _ in range(20):
        s = _random_stats(rng, 5)
        assert frechet_distance(s, s) <= 1e-6


def test_frechet_matches_extended_precision(rng):
    for _ in range(5):
        s1, s2 = _random_stats(rng, 4), _random_stats(rng, 4)
        ref = frechet_mpmath(s1.mean, s1.cov, s2.mean, s2.cov)
        assert abs(frechet_distance(s1, s2) - ref) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_frechet_symmetric(seed, d):
    rng = np.random.default_rng(seed)
    s1, s2 = _random_stats(rng, d), _random_stats(rng, d)
    assert abs(frechet_distance(s1, s2) - frechet_distance(s2, s1)) <= 1e-8 * max(1.0, frechet_distance(s1, s2))


def test_frechet_rejects_indefinite():
    bad = GaussianStats([0.0, 0.0], [[1.0, 0.0], [0.0, -0.5]])
    with pytest.raises(NumericalError):
        frechet_distance(bad, GaussianStats([0.0, 0.0], np.eye(2)))


def test_frechet_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([0.0, 0.0], np.eye(2)))


def test_iou():
    a = np.zeros((4, 4))
    a[:2] = 1
    b = np.zeros((4, 4))
    b[1:3] = 1
    assert foreground_iou(a, b) == pytest.approx(1 / 3)
    assert foreground_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_evaluate_report(rng, backbone):
    preds = [rng.random((32, 32, 3)) for _ in range(3)]
    report = evaluate(preds, preds, backbone)
    assert report.ssim == 1.0 and report.psnr_db == PSNR_INF and report.perceptual == 0.0
    assert report.fid is not None and report.fid <= 1e-6
    assert report.backbone == backbone.provenance
    assert report.to_json()["psnr_db"] == "inf"
    refs = [rng.random((32, 32, 3)) for _ in range(3)]
    other = evaluate(preds, refs, backbone)
    assert -1 <= other.ssim <= 1 and other.psnr_db > 0 and other.fid >= -1e-6
    assert isinstance(other, MetricReport) and other.frame_count == 3
