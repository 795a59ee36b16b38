"""Image decoding, bilinear resizing, and the feature channels feeding saliency.

Images are float64 arrays of shape (height, width, 3) with values in [0, 1],
row-major, RGB. Scalar maps are float64 arrays of shape (height, width).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "GaborParams",
    "GABOR_BANK",
    "load_image",
    "save_image",
    "save_map_png",
    "validate_image",
    "validate_map",
    "resize_bilinear",
    "resize_plane",
    "to_luminance",
    "color_opponency",
    "gabor_kernel",
    "gabor_response",
    "build_pyramid",
]

# Rec.601 intensity weights.
_LUMA_R, _LUMA_G, _LUMA_B = 0.299, 0.587, 0.114


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check RGB image shape, finiteness and the [0, 1] range."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has empty dimension: {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def validate_map(m: np.ndarray) -> np.ndarray:
    """Check scalar map shape and finiteness."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected (h, w) map, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"map has empty dimension: {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("map contains non-finite values")
    return m


def load_image(path) -> np.ndarray:
    """Decode a PNG or JPEG file into a float RGB image (8-bit values / 255)."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        data = np.asarray(rgb, dtype=np.float64) / 255.0
    return data


def save_image(img: np.ndarray, path) -> None:
    """Write a float RGB image as an 8-bit PNG."""
    img = validate_image(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def save_map_png(m: np.ndarray, path) -> None:
    """Write a scalar map as 8-bit grayscale, [min, max] mapped linearly to [0, 255]."""
    m = validate_map(m)
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        scaled = (m - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(m)
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def _axis_coords(n_in: int, n_out: int):
    """Half-pixel-center sample coordinates, clamped to the source edges."""
    scale = n_in / n_out
    xs = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    xs = np.clip(xs, 0.0, n_in - 1.0)
    i0 = np.floor(xs).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = xs - i0
    return i0, i1, t


def _bilinear(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = arr.shape[0], arr.shape[1]
    x0, x1, tx = _axis_coords(w, out_w)
    y0, y1, ty = _axis_coords(h, out_h)
    # Rows first, then columns; the lerp form a + (b - a) * t keeps constant
    # inputs exactly constant.
    rows = arr[:, x0] + (arr[:, x1] - arr[:, x0]) * (tx[None, :, None] if arr.ndim == 3 else tx[None, :])
    if arr.ndim == 3:
        out = rows[y0] + (rows[y1] - rows[y0]) * ty[:, None, None]
    else:
        out = rows[y0] + (rows[y1] - rows[y0]) * ty[:, None]
    return out


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize an RGB image; the identity request returns a bit-for-bit copy."""
    img = validate_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"requested zero-dimension resize: {out_w}x{out_h}")
    if (img.shape[1], img.shape[0]) == (out_w, out_h):
        return img.copy()
    out = _bilinear(img, out_w, out_h)
    return np.clip(out, 0.0, 1.0)


def resize_plane(m: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize a scalar map with the same interpolation, without range clipping."""
    m = validate_map(m)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"requested zero-dimension resize: {out_w}x{out_h}")
    if (m.shape[1], m.shape[0]) == (out_w, out_h):
        return m.copy()
    return _bilinear(m, out_w, out_h)


def to_luminance(img: np.ndarray) -> np.ndarray:
    """Rec.601 luminance: Y = 0.299 R + 0.587 G + 0.114 B."""
    img = validate_image(img)
    y = _LUMA_R * img[:, :, 0] + _LUMA_G * img[:, :, 1] + _LUMA_B * img[:, :, 2]
    return np.clip(y, 0.0, 1.0)


def color_opponency(img: np.ndarray):
    """Opponency channels RG = R - G and BY = B - (R + G) / 2, each in [-1, 1]."""
    img = validate_image(img)
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    return r - g, b - (r + g) / 2.0


@dataclass(frozen=True)
class GaborParams:
    """Even-phase Gabor kernel parameters (pixels / radians)."""

    wavelength: float = 8.0
    orientation: float = 0.0
    sigma: float = 4.0
    aspect_ratio: float = 1.0
    kernel_radius: int = 12

    def __post_init__(self):
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kernel_radius < 1:
            raise ValueError("kernel_radius must be >= 1")


# Four-orientation bank used by the saliency channels.
GABOR_BANK = tuple(
    GaborParams(orientation=theta) for theta in (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
)


def gabor_kernel(params: GaborParams) -> np.ndarray:
    """Realize the kernel: cosine carrier, mean-subtracted, then L2-normalized."""
    r = params.kernel_radius
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    c, s = math.cos(params.orientation), math.sin(params.orientation)
    xr = xs * c + ys * s
    yr = -xs * s + ys * c
    gamma2 = params.aspect_ratio**2
    envelope = np.exp(-(xr**2 + gamma2 * yr**2) / (2.0 * params.sigma**2))
    kernel = envelope * np.cos(2.0 * math.pi * xr / params.wavelength)
    kernel -= kernel.mean()
    norm = np.linalg.norm(kernel)
    if norm > 0:
        kernel /= norm
    return kernel


def gabor_response(m: np.ndarray, params: GaborParams) -> np.ndarray:
    """Convolve with the realized kernel, reflect-padded, preserving dimensions."""
    m = validate_map(m)
    side = 2 * params.kernel_radius
    if m.shape[0] <= side or m.shape[1] <= side:
        raise ValueError(
            f"map {m.shape[1]}x{m.shape[0]} too small for kernel radius {params.kernel_radius}"
        )
    return ndimage.convolve(m, gabor_kernel(params), mode="reflect")


def build_pyramid(m: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 0 is the input; each next level halves both dimensions (floor)."""
    m = validate_map(m)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    need = 2 ** (levels - 1)
    if m.shape[0] < need or m.shape[1] < need:
        raise ValueError(
            f"map {m.shape[1]}x{m.shape[0]} too small for {levels} pyramid levels"
        )
    out = [m.copy()]
    for _ in range(levels - 1):
        prev = out[-1]
        out.append(resize_plane(prev, max(1, prev.shape[1] // 2), max(1, prev.shape[0] // 2)))
    return out
