"""Full-reference image quality metrics: PSNR and single-scale SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageio import Image
from .tensor import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


@dataclass
class MetricReport:
    psnr: float         # decibels; math.inf when images are identical
    ssim: float


def _check_same_size(a: Image, b: Image):
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"image sizes differ: {a.pixels.shape} vs {b.pixels.shape}")


def psnr(a: Image, b: Image) -> float:
    """10*log10(1/MSE) with MAX=1; identical images give inf."""
    _check_same_size(a, b)
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _local_weighted(x, kernel):
    # valid-mode weighted local sums via sliding windows
    win = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM over valid window positions, averaged across channels.

    11x11 Gaussian weighting with sigma 1.5, K1=0.01, K2=0.03, L=1.
    """
    _check_same_size(a, b)
    h, w = a.pixels.shape[1:]
    if min(h, w) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    kernel = _gaussian_window()
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    vals = []
    for c in range(3):
        x = a.pixels[c].astype(np.float64)
        y = b.pixels[c].astype(np.float64)
        mx = _local_weighted(x, kernel)
        my = _local_weighted(y, kernel)
        mxx = _local_weighted(x * x, kernel)
        myy = _local_weighted(y * y, kernel)
        mxy = _local_weighted(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


def report(pred: Image, gt: Image) -> MetricReport:
    return MetricReport(psnr=psnr(pred, gt), ssim=ssim(pred, gt))


def format_db(value: float) -> str:
    """CSV rendering with the literal sentinel for infinite PSNR."""
    return "inf" if math.isinf(value) else f"{value:.4f}"
