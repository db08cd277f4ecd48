"""Classical photometric statistics: Sobel gradients, luminance moments,
exposure fractions, dark channel.

Each statistic has a tensor form (differentiable, NCHW) used inside the
training graph and a thin array-level wrapper for CLI / analysis use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imageio import GrayImage, Image

TAU_UNDER = 0.05
TAU_OVER = 0.95
DARK_WINDOW = 16

# cross-correlation Sobel kernels; Kx responds to vertical edges
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


@dataclass
class StatVector:
    """Six luminance statistics: mean, spread, shape, and clip fractions."""

    mu: float
    sigma: float
    skew: float
    kurt: float
    p_under: float
    p_over: float

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.array([self.mu, self.sigma, self.skew, self.kurt,
                         self.p_under, self.p_over], dtype=dtype)


@dataclass
class GradMap:
    magnitude: np.ndarray       # (H, W), >= 0


@dataclass
class DarkChannel:
    values: np.ndarray          # (H, W), in [0,1]


def sobel_t(x: T.Tensor) -> T.Tensor:
    """Gradient magnitude sqrt(Ix^2 + Iy^2) of an NCHW single-channel tensor."""
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise T.ShapeError(f"sobel expects (N,1,H,W), got {x.data.shape}")
    if x.data.shape[2] < 3 or x.data.shape[3] < 3:
        raise T.ShapeError(f"sobel needs at least 3x3 input, got {x.data.shape[2:]}")
    dt = x.data.dtype
    kx = T.Tensor(_SOBEL_X.reshape(1, 1, 3, 3).astype(dt))
    ky = T.Tensor(_SOBEL_Y.reshape(1, 1, 3, 3).astype(dt))
    zb = T.Tensor(np.zeros(1, dtype=dt))
    xp = T.pad2d(x, (1, 1, 1, 1), mode="replicate")
    gx = T.conv2d(xp, kx, zb)
    gy = T.conv2d(xp, ky, zb)
    return (gx * gx + gy * gy).sqrt()


def sobel(gray: GrayImage) -> GradMap:
    with T.no_grad():
        t = sobel_t(T.Tensor(gray.pixels[None, None].astype(np.float64)))
    return GradMap(t.data[0, 0])


def moments(values: np.ndarray, sigma_floor: float = 1e-8):
    """Population (mu, sigma, skew, kurt); degenerate spread maps to (0, 3)."""
    v = values.astype(np.float64).reshape(-1)
    mu = v.mean()
    d = v - mu
    var = (d * d).mean()
    sigma = np.sqrt(var)
    if sigma < sigma_floor:
        return float(mu), float(sigma), 0.0, 3.0
    m3 = (d ** 3).mean()
    m4 = (d ** 4).mean()
    return float(mu), float(sigma), float(m3 / sigma ** 3), float(m4 / sigma ** 4)


def stat_vector(gray: GrayImage, tau_u: float = TAU_UNDER,
                tau_o: float = TAU_OVER) -> StatVector:
    """Luminance moments plus strict under/over-exposure fractions."""
    v = gray.pixels.astype(np.float64)
    mu, sigma, skew, kurt = moments(v)
    n = v.size
    p_under = float((v < tau_u).sum()) / n
    p_over = float((v > tau_o).sum()) / n
    return StatVector(mu, sigma, skew, kurt, p_under, p_over)


def dark_channel_t(img: T.Tensor, window: int = DARK_WINDOW) -> T.Tensor:
    """Per-pixel min over the color channels then over a window x window
    neighbourhood (replicate-padded, left-biased for even window).

    Input (N, 3, H, W), output (N, 1, H, W).  Ties route the gradient to
    the first channel, then to the first window pixel in row-major order.
    """
    if img.data.ndim != 4 or img.data.shape[1] != 3:
        raise T.ShapeError(f"dark_channel expects (N,3,H,W), got {img.data.shape}")
    r = img[:, 0:1]
    g = img[:, 1:2]
    b = img[:, 2:3]
    cmin = T.minimum(T.minimum(r, g), b)
    return T.windowed_min2d(cmin, window)


def dark_channel(img: Image, window: int = DARK_WINDOW) -> DarkChannel:
    with T.no_grad():
        t = dark_channel_t(T.Tensor(img.pixels[None].astype(np.float64)), window)
    return DarkChannel(t.data[0, 0])
