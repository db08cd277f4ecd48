"""PSNR/SSIM against scalar formula oracles."""

import math

import numpy as np
import pytest

from exposhift import metrics as M
from exposhift.imageio import Image
from exposhift.tensor import ShapeError


def img(arr):
    return Image(np.asarray(arr, dtype=np.float32))


def test_psnr_identical_is_inf():
    rng = np.random.default_rng(0)
    a = img(rng.random((3, 8, 8)))
    assert math.isinf(M.psnr(a, a))
    assert M.format_db(M.psnr(a, a)) == "inf"


def test_psnr_uniform_error():
    a = img(np.full((3, 4, 4), 0.5))
    b = img(np.full((3, 4, 4), 0.6))
    assert M.psnr(a, b) == pytest.approx(20.0, abs=1e-4)


def test_psnr_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    a = img(rng.random((3, 6, 7)))
    b = img(rng.random((3, 6, 7)))
    se = 0.0
    for c in range(3):
        for i in range(6):
            for j in range(7):
                d = float(a.pixels[c, i, j]) - float(b.pixels[c, i, j])
                se += d * d
    mse = se / (3 * 6 * 7)
    assert M.psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-6)


def test_psnr_symmetry_and_monotonicity():
    base = img(np.full((3, 4, 4), 0.5))
    small = img(np.full((3, 4, 4), 0.55))
    large = img(np.full((3, 4, 4), 0.7))
    assert M.psnr(base, small) == M.psnr(small, base)
    assert M.psnr(base, small) > M.psnr(base, large)


def test_psnr_size_mismatch():
    with pytest.raises(ShapeError):
        M.psnr(img(np.zeros((3, 4, 4))), img(np.zeros((3, 4, 5))))


def test_ssim_identical_is_one():
    rng = np.random.default_rng(2)
    a = img(rng.random((3, 16, 16)))
    assert M.ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_luminance_term():
    a = img(np.full((3, 12, 12), 0.5))
    b = img(np.full((3, 12, 12), 0.6))
    c1 = (0.01 * 1.0) ** 2
    # zero variance: structure/contrast term is exactly 1; the oracle
    # uses the float32-quantized intensities the images actually hold
    u, v = float(np.float32(0.5)), float(np.float32(0.6))
    expect = (2 * u * v + c1) / (u ** 2 + v ** 2 + c1)
    assert M.ssim(a, b) == pytest.approx(expect, abs=1e-9)


def test_ssim_inverted_checkerboard_negative():
    i, j = np.indices((16, 16))
    board = ((i + j) % 2).astype(np.float32)
    a = img(np.stack([board] * 3))
    b = img(np.stack([1.0 - board] * 3))
    assert M.ssim(a, b) < 0.0


def test_ssim_symmetry():
    rng = np.random.default_rng(3)
    a = img(rng.random((3, 14, 14)))
    b = img(rng.random((3, 14, 14)))
    assert M.ssim(a, b) == pytest.approx(M.ssim(b, a), abs=1e-12)


def test_ssim_too_small_raises():
    with pytest.raises(ShapeError):
        M.ssim(img(np.zeros((3, 10, 12))), img(np.zeros((3, 10, 12))))


def test_ssim_matches_windowed_scalar_oracle():
    # direct evaluation of the SSIM map formula at every valid position
    rng = np.random.default_rng(4)
    a = img(rng.random((3, 13, 12)))
    b = img((a.pixels * 0.8 + 0.1 * rng.random((3, 13, 12))).astype(np.float32))
    r = np.arange(11, dtype=np.float64) - 5
    g = np.exp(-(r * r) / (2 * 1.5 ** 2))
    k = np.outer(g, g)
    k /= k.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    chans = []
    for c in range(3):
        x = a.pixels[c].astype(np.float64)
        y = b.pixels[c].astype(np.float64)
        vals = []
        for i in range(13 - 10):
            for j in range(12 - 10):
                wx = x[i:i + 11, j:j + 11]
                wy = y[i:i + 11, j:j + 11]
                mx = (k * wx).sum()
                my = (k * wy).sum()
                vx = (k * wx * wx).sum() - mx * mx
                vy = (k * wy * wy).sum() - my * my
                cxy = (k * wx * wy).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        chans.append(np.mean(vals))
    assert M.ssim(a, b) == pytest.approx(float(np.mean(chans)), abs=1e-10)


def test_report_bundles_both():
    rng = np.random.default_rng(5)
    a = img(rng.random((3, 12, 12)))
    rep = M.report(a, a)
    assert math.isinf(rep.psnr) and rep.ssim == pytest.approx(1.0)
