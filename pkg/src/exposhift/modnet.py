"""Exposure modulation network: a three-scale U-shaped corrector whose
features are steered by the descriptor difference.

Per scale the feature map is transformed twice: a feature-wise affine
(per-channel alpha/beta predicted from dz) and a channel rebalancing
gain (1+a with a in (0,1), also predicted from dz).  The decoder fuses
the modulated scales and a final 3x3 conv emits a residual R; the
corrected image is clip(I_s + R, 0, 1).  FiLM outputs and the final
conv are zero-initialized, so the untrained network is exactly the
identity map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

SCALE_CHANNELS = (32, 64, 64)
DESCRIPTOR_DIM = 66
FILM_HIDDEN = 64
MIN_HW = 4          # reflect padding to a multiple of 4 needs pad < side

PARAM_SHAPES = {
    "enc1.w": (32, 3, 3, 3), "enc1.b": (32,),
    "enc2.w": (64, 32, 3, 3), "enc2.b": (64,),
    "enc3.w": (64, 64, 3, 3), "enc3.b": (64,),
    "film1.fc1.w": (FILM_HIDDEN, DESCRIPTOR_DIM), "film1.fc1.b": (FILM_HIDDEN,),
    "film1.fc2.w": (2 * 32, FILM_HIDDEN), "film1.fc2.b": (2 * 32,),
    "film2.fc1.w": (FILM_HIDDEN, DESCRIPTOR_DIM), "film2.fc1.b": (FILM_HIDDEN,),
    "film2.fc2.w": (2 * 64, FILM_HIDDEN), "film2.fc2.b": (2 * 64,),
    "film3.fc1.w": (FILM_HIDDEN, DESCRIPTOR_DIM), "film3.fc1.b": (FILM_HIDDEN,),
    "film3.fc2.w": (2 * 64, FILM_HIDDEN), "film3.fc2.b": (2 * 64,),
    "gate1.w": (32, DESCRIPTOR_DIM), "gate1.b": (32,),
    "gate2.w": (64, DESCRIPTOR_DIM), "gate2.b": (64,),
    "gate3.w": (64, DESCRIPTOR_DIM), "gate3.b": (64,),
    "dec2.w": (64, 128, 3, 3), "dec2.b": (64,),
    "dec1.w": (32, 96, 3, 3), "dec1.b": (32,),
    "final.w": (3, 32, 3, 3), "final.b": (3,),
}

# zero-initialized so alpha=1, beta=0 and R=0 at the start
_ZERO_INIT = ("film1.fc2.w", "film2.fc2.w", "film3.fc2.w", "final.w")


def delta_z(z_s, z_r):
    """Descriptor shift z_r - z_s; accepts (66,) arrays or (N,66) tensors."""
    a = z_s if isinstance(z_s, T.Tensor) else T.Tensor(np.asarray(z_s))
    b = z_r if isinstance(z_r, T.Tensor) else T.Tensor(np.asarray(z_r))
    if a.data.shape != b.data.shape:
        raise T.ShapeError(f"descriptor shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.data.shape[-1] != DESCRIPTOR_DIM:
        raise T.ShapeError(f"descriptor length must be {DESCRIPTOR_DIM}, "
                           f"got {a.data.shape[-1]}")
    return b - a


def film_apply(f: T.Tensor, alpha: T.Tensor, beta: T.Tensor) -> T.Tensor:
    """Per-channel affine: alpha(n,c)*F(n,c,h,w) + beta(n,c)."""
    n, c = f.data.shape[:2]
    if alpha.data.shape != (n, c) or beta.data.shape != (n, c):
        raise T.ShapeError(f"film parameters {alpha.data.shape}/{beta.data.shape} "
                           f"do not match feature channels ({n},{c})")
    return alpha.reshape(n, c, 1, 1) * f + beta.reshape(n, c, 1, 1)


def pcr_apply(f: T.Tensor, a: T.Tensor) -> T.Tensor:
    """Channel rebalancing: scale channel c by (1 + a(n,c)), a in (0,1)."""
    n, c = f.data.shape[:2]
    if a.data.shape != (n, c):
        raise T.ShapeError(f"gate shape {a.data.shape} does not match ({n},{c})")
    return (1.0 + a.reshape(n, c, 1, 1)) * f


def init_modnet_params(rng) -> T.ParamSet:
    ps = T.ParamSet()
    dt = T.default_dtype()
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(".b") or name in _ZERO_INIT:
            ps.add(name, np.zeros(shape, dtype=dt))
        elif len(shape) == 4:
            ps.add(name, T.kaiming_uniform(rng, shape, shape[1] * shape[2] * shape[3]))
        else:
            ps.add(name, T.kaiming_uniform(rng, shape, shape[1]))
    return ps


def validate_modnet_params(ps: T.ParamSet):
    names = set(ps.names())
    expected = set(PARAM_SHAPES)
    if names != expected:
        raise T.ShapeError(f"modnet params mismatch: missing {sorted(expected - names)}, "
                           f"unexpected {sorted(names - expected)}")
    for name, shape in PARAM_SHAPES.items():
        if tuple(ps[name].data.shape) != shape:
            raise T.ShapeError(f"{name}: shape {ps[name].data.shape} != required {shape}")
    if PARAM_SHAPES["final.w"][0] != 3:
        raise T.ShapeError("final conv must emit 3 channels")


class ModNet:
    """Parameter bundle plus the conditional forward pass."""

    def __init__(self, params: T.ParamSet):
        validate_modnet_params(params)
        self.params = params

    @classmethod
    def init(cls, rng) -> "ModNet":
        return cls(init_modnet_params(rng))

    def film_params(self, dz: T.Tensor, scale: int):
        """(alpha, beta), each (N, C_scale); identity (1, 0) at init."""
        if scale not in (1, 2, 3):
            raise ValueError(f"scale must be 1, 2 or 3, got {scale}")
        p = self.params
        c = SCALE_CHANNELS[scale - 1]
        h = T.linear(dz, p[f"film{scale}.fc1.w"], p[f"film{scale}.fc1.b"]).relu()
        raw = T.linear(h, p[f"film{scale}.fc2.w"], p[f"film{scale}.fc2.b"])
        alpha = raw[:, :c] + 1.0
        beta = raw[:, c:]
        return alpha, beta

    def pcr_gate(self, dz: T.Tensor, scale: int) -> T.Tensor:
        """Gate a in (0,1)^(N,C_scale): sigmoid of a linear map of dz."""
        if scale not in (1, 2, 3):
            raise ValueError(f"scale must be 1, 2 or 3, got {scale}")
        p = self.params
        return T.linear(dz, p[f"gate{scale}.w"], p[f"gate{scale}.b"]).sigmoid()

    def _modulate(self, f: T.Tensor, dz: T.Tensor, scale: int) -> T.Tensor:
        alpha, beta = self.film_params(dz, scale)
        return pcr_apply(film_apply(f, alpha, beta), self.pcr_gate(dz, scale))

    def forward_batch(self, images, dz: T.Tensor):
        """(N,3,H,W) source batch + (N,66) dz -> (residual, corrected).

        Sizes not divisible by 4 are reflect-padded for the two stride-2
        stages and the residual is cropped back.
        """
        x = images if isinstance(images, T.Tensor) else T.Tensor(np.asarray(images))
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise T.ShapeError(f"forward expects (N,3,H,W), got {x.data.shape}")
        n, _, h, w = x.data.shape
        if h < MIN_HW or w < MIN_HW:
            raise T.ShapeError(f"input sides must be >= {MIN_HW}, got {h}x{w}")
        if dz.data.shape != (n, DESCRIPTOR_DIM):
            raise T.ShapeError(f"dz must be ({n},{DESCRIPTOR_DIM}), got {dz.data.shape}")
        ph = (-h) % 4
        pw = (-w) % 4
        xp = T.pad2d(x, (0, ph, 0, pw), mode="reflect") if (ph or pw) else x

        p = self.params
        f1 = T.conv2d(xp, p["enc1.w"], p["enc1.b"], stride=1, padding=1).relu()
        f2 = T.conv2d(f1, p["enc2.w"], p["enc2.b"], stride=2, padding=1).relu()
        f3 = T.conv2d(f2, p["enc3.w"], p["enc3.b"], stride=2, padding=1).relu()

        f1h = self._modulate(f1, dz, 1)
        f2h = self._modulate(f2, dz, 2)
        f3h = self._modulate(f3, dz, 3)

        u2 = T.bilinear_upsample(f3h, 2)
        d2 = T.conv2d(T.concat([u2, f2h], axis=1), p["dec2.w"], p["dec2.b"],
                      stride=1, padding=1).relu()
        u1 = T.bilinear_upsample(d2, 2)
        d1 = T.conv2d(T.concat([u1, f1h], axis=1), p["dec1.w"], p["dec1.b"],
                      stride=1, padding=1).relu()
        residual = T.conv2d(d1, p["final.w"], p["final.b"], stride=1, padding=1)
        if ph or pw:
            residual = residual[:, :, :h, :w]
        corrected = (x + residual).clip(0.0, 1.0)
        return residual, corrected
