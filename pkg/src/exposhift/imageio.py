"""Image loading, saving, grayscale conversion and resizing.

Images live in memory as channel-planar float32 arrays in [0,1]:
RGB as (3, H, W), grayscale as (H, W).  On disk: 8-bit PNG (via
Pillow) or binary PPM (P6), both channel-interleaved.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image as _PILImage, UnidentifiedImageError

from .tensor import bilinear_matrix

# grayscale weights, kept verbatim (they sum to 0.9999, not renormalized)
GRAY_R = 0.2989
GRAY_G = 0.5870
GRAY_B = 0.1140


class ImageIOError(ValueError):
    """Unsupported format, truncated file, or wrong channel count."""


@dataclass
class Image:
    """RGB image; pixels is (3, H, W) float32 in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ImageIOError(f"Image pixels must be (3, H, W), got {p.shape}")
        if p.shape[1] < 1 or p.shape[2] < 1:
            raise ImageIOError("Image must contain at least one pixel")
        if p.dtype != np.float32:
            self.pixels = p = p.astype(np.float32)
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ImageIOError("Image intensities must lie in [0,1]")

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    @property
    def channels(self):
        return 3


@dataclass
class GrayImage:
    """Single-channel image; pixels is (H, W) float32 in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2:
            raise ImageIOError(f"GrayImage pixels must be (H, W), got {p.shape}")
        if p.dtype != np.float32:
            self.pixels = p = p.astype(np.float32)
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ImageIOError("GrayImage intensities must lie in [0,1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def _from_interleaved(raw: np.ndarray) -> Image:
    # (H, W, 3) uint8 -> planar float
    return Image((raw.astype(np.float32) / 255.0).transpose(2, 0, 1))


def _to_interleaved(img: Image) -> np.ndarray:
    # round half-up to 8 bits
    q = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    return q.transpose(1, 2, 0)


def _load_ppm(data: bytes) -> Image:
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError("truncated PPM header")
        return data[start:pos]

    magic = token()
    if magic != b"P6":
        raise ImageIOError(f"unsupported PPM magic {magic!r}")
    try:
        w = int(token())
        h = int(token())
        maxval = int(token())
    except ValueError as e:
        raise ImageIOError("malformed PPM header") from e
    if maxval != 255:
        raise ImageIOError(f"only 8-bit PPM supported, maxval {maxval}")
    if w < 1 or h < 1:
        raise ImageIOError(f"invalid PPM dimensions {w}x{h}")
    pos += 1                                  # single whitespace after maxval
    body = data[pos:pos + 3 * w * h]
    if len(body) < 3 * w * h:
        raise ImageIOError("truncated PPM pixel data")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return _from_interleaved(raw)


def _load_png(data: bytes) -> Image:
    try:
        with _PILImage.open(io.BytesIO(data)) as im:
            if im.mode != "RGB":
                raise ImageIOError(f"expected 3-channel RGB PNG, got mode {im.mode!r}")
            raw = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise ImageIOError("unreadable PNG") from e
    except OSError as e:
        raise ImageIOError(f"truncated or corrupt PNG: {e}") from e
    return _from_interleaved(raw)


def load(path) -> Image:
    """Load an RGB image from an 8-bit PNG or binary PPM (P6) file."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:1] == b"P" and data[1:2].isdigit():
        return _load_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(data)
    raise ImageIOError(f"unsupported image format in {path}")


def save(path, img: Image):
    """Write an Image as PNG or PPM (P6) depending on the file extension."""
    p = str(path)
    raw = _to_interleaved(img)
    if p.lower().endswith(".png"):
        _PILImage.fromarray(raw, mode="RGB").save(p, format="PNG")
    elif p.lower().endswith((".ppm", ".pnm")):
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        with open(p, "wb") as f:
            f.write(header)
            f.write(raw.tobytes())
    else:
        raise ImageIOError(f"unsupported output format for {path}")


def to_gray(img: Image) -> GrayImage:
    """Weighted grayscale: 0.2989 R + 0.5870 G + 0.1140 B, clamped to [0,1]."""
    r, g, b = img.pixels
    gray = GRAY_R * r + GRAY_G * g + GRAY_B * b
    return GrayImage(np.clip(gray, 0.0, 1.0))


def gray_array(rgb: np.ndarray) -> np.ndarray:
    """Same weighted sum for raw (..., 3, H, W) arrays inside the graph-free path."""
    return np.clip(GRAY_R * rgb[..., 0, :, :] + GRAY_G * rgb[..., 1, :, :]
                   + GRAY_B * rgb[..., 2, :, :], 0.0, 1.0)


def resize(img: Image, h: int, w: int) -> Image:
    """Bilinear resample to h x w (half-pixel centres, edge clamp)."""
    if h < 1 or w < 1:
        raise ImageIOError(f"invalid resize target {h}x{w}")
    if (h, w) == (img.height, img.width):
        return Image(img.pixels.copy())
    mh = bilinear_matrix(img.height, h)
    mw = bilinear_matrix(img.width, w)
    out = np.einsum("ij,cjk,lk->cil", mh, img.pixels.astype(np.float64), mw)
    # rows of the interpolation matrices are convex weights, stay in range
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32))
