"""Image containers, color conversions, and intrinsic composition math.

All pixel data is float64 linear light in (height, width, channels)
layout with channels 1 or 3. The intrinsic model is I = R * S with a
single-channel shading layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from intrinsic.autodiff import Tensor
from intrinsic.errors import ContractError, DimensionError, RangeError

# Linear sRGB to CIE XYZ under D65.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_XYZ = _RGB_TO_XYZ @ np.ones(3)
_UN_PRIME = 4.0 * _WHITE_XYZ[0] / (_WHITE_XYZ[0] + 15.0 * _WHITE_XYZ[1] + 3.0 * _WHITE_XYZ[2])
_VN_PRIME = 9.0 * _WHITE_XYZ[1] / (_WHITE_XYZ[0] + 15.0 * _WHITE_XYZ[1] + 3.0 * _WHITE_XYZ[2])


class ImageF:
    """Float64 linear-light image of shape (height, width, channels)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"ImageF needs (H, W, C) data, got ndim={arr.ndim}")
        if arr.shape[2] not in (1, 3):
            raise DimensionError(f"ImageF supports 1 or 3 channels, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise RangeError("ImageF values must be finite")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __repr__(self):
        return f"ImageF({self.height}x{self.width}x{self.channels})"


def to_tensor(img: ImageF, requires_grad: bool = False) -> Tensor:
    """(H, W, C) image as a (1, C, H, W) tensor."""
    return Tensor(np.transpose(img.data, (2, 0, 1))[None], requires_grad=requires_grad)


def from_tensor(t: Tensor, item: int = 0) -> ImageF:
    return ImageF(np.transpose(t.data[item], (1, 2, 0)))


@dataclass
class IntrinsicTriplet:
    """Ground-truth (input, reflectance, shading) with input = R * S."""

    input: ImageF
    reflectance: ImageF
    shading: ImageF

    def __post_init__(self):
        if self.input.channels != 3 or self.reflectance.channels != 3:
            raise DimensionError("triplet input and reflectance must have 3 channels")
        if self.shading.channels != 1:
            raise DimensionError("triplet shading must have 1 channel")
        dims = {(m.height, m.width) for m in (self.input, self.reflectance, self.shading)}
        if len(dims) != 1:
            raise DimensionError(f"triplet members disagree on size: {sorted(dims)}")


@dataclass
class RealSceneGroup:
    """Pixel-aligned photographs of one static scene under varying light."""

    scene_id: str
    images: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) < 2:
            raise ContractError(
                f"scene {self.scene_id!r}: a real scene group needs at least 2 images"
            )
        dims = {(im.height, im.width) for im in self.images}
        if len(dims) != 1:
            raise DimensionError(
                f"scene {self.scene_id!r}: images disagree on size: {sorted(dims)}"
            )


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    """sRGB transfer curve to linear light; input must lie in [0, 1]."""
    e = np.asarray(encoded, dtype=np.float64)
    if e.size and (e.min() < 0.0 or e.max() > 1.0):
        raise RangeError("srgb_decode input must lie in [0, 1]")
    return np.where(e <= 0.04045, e / 12.92, ((e + 0.055) / 1.055) ** 2.4)


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear light to the sRGB transfer curve; input must lie in [0, 1]."""
    l = np.asarray(linear, dtype=np.float64)
    if l.size and (l.min() < 0.0 or l.max() > 1.0):
        raise RangeError("srgb_encode input must lie in [0, 1]")
    return np.where(l <= 0.0031308, 12.92 * l, 1.055 * np.power(l, 1.0 / 2.4) - 0.055)


def rgb_to_grayscale(img: ImageF) -> ImageF:
    """Rec. 601 luma weights applied to linear values."""
    if img.channels != 3:
        raise DimensionError(f"rgb_to_grayscale needs 3 channels, got {img.channels}")
    gray = img.data @ np.array([0.299, 0.587, 0.114])
    return ImageF(gray[:, :, None])


def rgb_to_luv(img: ImageF) -> ImageF:
    """Linear sRGB (D65) to CIE 1976 L*u*v*."""
    if img.channels != 3:
        raise DimensionError(f"rgb_to_luv needs 3 channels, got {img.channels}")
    if img.data.min() < 0.0:
        raise RangeError("rgb_to_luv input must be non-negative linear RGB")
    xyz = img.data @ _RGB_TO_XYZ.T
    x, y, z = xyz[:, :, 0], xyz[:, :, 1], xyz[:, :, 2]
    t = y / _WHITE_XYZ[1]
    delta3 = (6.0 / 29.0) ** 3
    f = np.where(t > delta3, np.cbrt(t), t / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lstar = 116.0 * f - 16.0
    den = x + 15.0 * y + 3.0 * z
    safe = den > 0.0
    uprime = np.where(safe, 4.0 * x / np.where(safe, den, 1.0), _UN_PRIME)
    vprime = np.where(safe, 9.0 * y / np.where(safe, den, 1.0), _VN_PRIME)
    ustar = 13.0 * lstar * (uprime - _UN_PRIME)
    vstar = 13.0 * lstar * (vprime - _VN_PRIME)
    return ImageF(np.stack([lstar, ustar, vstar], axis=2))


def compose(reflectance: ImageF, shading: ImageF) -> ImageF:
    """I = R * S with the single shading channel broadcast over RGB."""
    if shading.channels != 1:
        raise DimensionError(f"compose: shading must have 1 channel, got {shading.channels}")
    if (reflectance.height, reflectance.width) != (shading.height, shading.width):
        raise DimensionError(
            f"compose: reflectance {reflectance.height}x{reflectance.width} vs "
            f"shading {shading.height}x{shading.width}"
        )
    return ImageF(reflectance.data * shading.data)


def retexture(
    new_texture: ImageF, shading: ImageF, mask: ImageF, original: ImageF
) -> ImageF:
    """Swap reflectance under the estimated shading inside the mask."""
    dims = {(m.height, m.width) for m in (new_texture, shading, mask, original)}
    if len(dims) != 1:
        raise DimensionError(f"retexture: operand sizes disagree: {sorted(dims)}")
    if mask.channels != 1:
        raise DimensionError(f"retexture: mask must have 1 channel, got {mask.channels}")
    m = mask.data
    if not np.all((np.abs(m) <= 1e-6) | (np.abs(m - 1.0) <= 1e-6)):
        raise ContractError("retexture: mask values must be 0 or 1")
    swapped = new_texture.data * shading.data
    return ImageF(m * swapped + (1.0 - m) * original.data)


def _resample_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Bilinear sampling weights, align-corners=false, edge-clamped."""
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    ratio = in_size / out_size
    for o in range(out_size):
        s = (o + 0.5) * ratio - 0.5
        i0 = int(np.floor(s))
        frac = s - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        mat[o, lo] += 1.0 - frac
        mat[o, hi] += frac
    return mat


def resize_bilinear(img: ImageF, out_h: int, out_w: int) -> ImageF:
    if out_h < 1 or out_w < 1:
        raise RangeError(f"resize target {out_h}x{out_w} must be positive")
    ar = _resample_matrix(out_h, img.height)
    ac = _resample_matrix(out_w, img.width)
    out = np.einsum("oh,hwc,pw->opc", ar, img.data, ac, optimize=True)
    return ImageF(out)


def resize_max_dim(img: ImageF, target: int) -> ImageF:
    """Resize so the larger dimension equals ``target``, aspect preserved."""
    if target < 1:
        raise RangeError(f"resize_max_dim target must be >= 1, got {target}")
    h, w = img.height, img.width
    if h >= w:
        out_h = target
        out_w = max(1, round(w * target / h))
    else:
        out_w = target
        out_h = max(1, round(h * target / w))
    return resize_bilinear(img, out_h, out_w)


def crop(img: ImageF, x: int, y: int, w: int, h: int) -> ImageF:
    """Exact window copy; (x, y) is the top-left corner in (col, row)."""
    if w < 1 or h < 1:
        raise RangeError(f"crop size {w}x{h} must be positive")
    if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise RangeError(
            f"crop window ({x},{y},{w},{h}) exceeds image {img.width}x{img.height}"
        )
    return ImageF(img.data[y : y + h, x : x + w].copy())
