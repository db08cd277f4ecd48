"""Exposure encoder: compresses an image's illumination state into a
66-component descriptor, independent of scene content.

Three information paths are fused: a region branch (conv/instance-norm
stack with one self-attention layer) summarizing spatial brightness
layout, a contrast branch run on the Sobel magnitude map, and the
six global luminance statistics.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .imageio import Image, gray_array
from .photostats import moments, sobel_t, TAU_UNDER, TAU_OVER

REGION_CHANNELS = (16, 32, 64)
CONTRAST_CHANNELS = (8, 16)
REGION_OUT = REGION_CHANNELS[-1] * 2 * 2        # 256 after the 2x2 pool
CONTRAST_OUT = 32
STAT_DIM = 6
FUSION_IN = REGION_OUT + CONTRAST_OUT + STAT_DIM  # 294
FUSION_HIDDEN = 128
DESCRIPTOR_DIM = 66

MIN_REGION_HW = 16     # three stride-2 stages down to >= 2x2
MIN_CONTRAST_HW = 8    # two stride-2 stages down to >= 2x2

# parameter name -> shape; single source of truth for init and validation
PARAM_SHAPES = {
    "region.conv1.w": (16, 1, 3, 3),
    "region.conv1.b": (16,),
    "region.conv2.w": (32, 16, 3, 3),
    "region.conv2.b": (32,),
    "region.conv3.w": (64, 32, 3, 3),
    "region.conv3.b": (64,),
    "region.attn.q.w": (64, 64, 1, 1),
    "region.attn.q.b": (64,),
    "region.attn.k.w": (64, 64, 1, 1),
    "region.attn.k.b": (64,),
    "region.attn.v.w": (64, 64, 1, 1),
    "region.attn.v.b": (64,),
    "region.attn.gamma": (),
    "contrast.conv1.w": (8, 1, 3, 3),
    "contrast.conv1.b": (8,),
    "contrast.conv2.w": (16, 8, 3, 3),
    "contrast.conv2.b": (16,),
    "contrast.fc.w": (CONTRAST_OUT, 16 * 2 * 2),
    "contrast.fc.b": (CONTRAST_OUT,),
    "fusion.fc1.w": (FUSION_HIDDEN, FUSION_IN),
    "fusion.fc1.b": (FUSION_HIDDEN,),
    "fusion.fc2.w": (DESCRIPTOR_DIM, FUSION_HIDDEN),
    "fusion.fc2.b": (DESCRIPTOR_DIM,),
}


def init_encoder_params(rng, fusion_in: int = FUSION_IN) -> T.ParamSet:
    """Kaiming-uniform convs/linears, zero biases, attention gamma 0.

    fusion_in exists so a mismatched fusion width fails here, at
    construction, rather than at the first forward pass.
    """
    if fusion_in != FUSION_IN:
        raise T.ShapeError(
            f"fusion input width must be {REGION_OUT}+{CONTRAST_OUT}+{STAT_DIM}"
            f"={FUSION_IN}, got {fusion_in}")
    ps = T.ParamSet()
    dt = T.default_dtype()
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(".b") or name.endswith("gamma"):
            ps.add(name, np.zeros(shape, dtype=dt))
        elif name.endswith(".w") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            ps.add(name, T.kaiming_uniform(rng, shape, fan_in))
        else:
            ps.add(name, T.kaiming_uniform(rng, shape, shape[1]))
    return ps


def validate_encoder_params(ps: T.ParamSet):
    names = set(ps.names())
    expected = set(PARAM_SHAPES)
    if names != expected:
        missing = expected - names
        extra = names - expected
        raise T.ShapeError(f"encoder params mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(extra)}")
    for name, shape in PARAM_SHAPES.items():
        if tuple(ps[name].data.shape) != shape:
            raise T.ShapeError(
                f"{name}: shape {ps[name].data.shape} != required {shape}")


class ExposureEncoder:
    """Bundles the parameter set with the forward passes."""

    def __init__(self, params: T.ParamSet):
        validate_encoder_params(params)
        self.params = params

    @classmethod
    def init(cls, rng) -> "ExposureEncoder":
        return cls(init_encoder_params(rng))

    # ---- branches --------------------------------------------------------

    def region_branch(self, gray: T.Tensor) -> T.Tensor:
        """(N,1,H,W) grayscale -> (N,256); H,W >= 16."""
        n, c, h, w = gray.data.shape
        if h < MIN_REGION_HW or w < MIN_REGION_HW:
            raise T.ShapeError(f"region branch needs >= {MIN_REGION_HW} px sides, "
                               f"got {h}x{w}")
        p = self.params
        x = gray
        for i in (1, 2, 3):
            # replicate padding keeps constant slices constant, so instance
            # norm exactly wipes flat-exposure responses
            x = T.pad2d(x, (1, 1, 1, 1), mode="replicate")
            x = T.conv2d(x, p[f"region.conv{i}.w"], p[f"region.conv{i}.b"], stride=2)
            x = T.instance_norm(x)
            x = x.relu()
        x = T.self_attention(x, p["region.attn.q.w"], p["region.attn.q.b"],
                             p["region.attn.k.w"], p["region.attn.k.b"],
                             p["region.attn.v.w"], p["region.attn.v.b"],
                             p["region.attn.gamma"])
        x = T.adaptive_avg_pool2d(x, 2, 2)
        return x.reshape(n, REGION_OUT)

    def contrast_branch(self, grad: T.Tensor) -> T.Tensor:
        """(N,1,H,W) gradient magnitude -> (N,32); H,W >= 8."""
        n, c, h, w = grad.data.shape
        if h < MIN_CONTRAST_HW or w < MIN_CONTRAST_HW:
            raise T.ShapeError(f"contrast branch needs >= {MIN_CONTRAST_HW} px sides, "
                               f"got {h}x{w}")
        p = self.params
        x = T.pad2d(grad, (1, 1, 1, 1), mode="replicate")
        x = T.conv2d(x, p["contrast.conv1.w"], p["contrast.conv1.b"], stride=2).relu()
        x = T.pad2d(x, (1, 1, 1, 1), mode="replicate")
        x = T.conv2d(x, p["contrast.conv2.w"], p["contrast.conv2.b"], stride=2).relu()
        x = T.adaptive_avg_pool2d(x, 2, 2).reshape(n, 16 * 2 * 2)
        return T.linear(x, p["contrast.fc.w"], p["contrast.fc.b"])

    # ---- full encode -----------------------------------------------------

    def encode_batch(self, images: np.ndarray) -> T.Tensor:
        """(N,3,H,W) pixel array -> (N,66) descriptor tensor.

        The image is data, not a parameter: grayscale, Sobel magnitude
        and the statistics enter the graph as constants, so gradients
        flow only to the encoder parameters.
        """
        if images.ndim != 4 or images.shape[1] != 3:
            raise T.ShapeError(f"encode expects (N,3,H,W), got {images.shape}")
        dt = T.default_dtype()
        gray = gray_array(images.astype(dt))              # (N,H,W)
        gray_t = T.Tensor(gray[:, None].astype(dt))
        with T.no_grad():
            grad_t = sobel_t(gray_t).detach()
        stats = np.stack([_stat_row(gray[i]) for i in range(images.shape[0])])
        f_reg = self.region_branch(gray_t)
        f_ctr = self.contrast_branch(grad_t)
        fused = T.concat([f_reg, f_ctr, T.Tensor(stats.astype(dt))], axis=1)
        p = self.params
        h = T.linear(fused, p["fusion.fc1.w"], p["fusion.fc1.b"]).relu()
        return T.linear(h, p["fusion.fc2.w"], p["fusion.fc2.b"])

    def encode(self, img: Image) -> np.ndarray:
        """Single image -> length-66 numpy descriptor (no graph kept)."""
        with T.no_grad():
            z = self.encode_batch(img.pixels[None])
        return z.data[0].copy()


def _stat_row(gray: np.ndarray) -> np.ndarray:
    mu, sigma, skew, kurt = moments(gray)
    n = gray.size
    p_u = float((gray < TAU_UNDER).sum()) / n
    p_o = float((gray > TAU_OVER).sum()) / n
    return np.array([mu, sigma, skew, kurt, p_u, p_o])


def stat_contribution(params: T.ParamSet, stats: np.ndarray) -> np.ndarray:
    """Pre-activation contribution of the statistics slice to the fusion
    layer; used to check content-agnostic behaviour of the S path."""
    w = params["fusion.fc1.w"].data[:, REGION_OUT + CONTRAST_OUT:]
    return w @ np.asarray(stats, dtype=w.dtype)
