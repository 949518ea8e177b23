"""Core raster types and shared image primitives.

Images hold real samples in [0, 1] (bit depth is never assumed), carry a
colorspace tag, and optionally a per-pixel validity mask.  All primitives
are pure: they never mutate their inputs and identical inputs give
bit-identical outputs.  Any operation that touches an invalid pixel marks
its output pixel invalid.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from .errors import ColorspaceError, FormatError, ParameterError, TransformError

__all__ = [
    "Colorspace",
    "Image",
    "HeatMap",
    "to_luma",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "gaussian_blur",
    "gaussian_kernel1d",
    "warp_affine",
    "rotate_about_center",
    "load_image",
    "save_image",
    "write_heatmap",
    "read_heatmap",
]

# BT.601 luma weights.
_LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_THM_MAGIC = b"THM1"


class Colorspace(enum.Enum):
    GRAY = "gray"
    RGB = "rgb"
    HSV = "hsv"


@dataclass(frozen=True)
class Image:
    """Planar raster: (H, W) for gray, (H, W, 3) for RGB/HSV, samples in [0, 1]."""

    data: np.ndarray
    colorspace: Colorspace = Colorspace.RGB
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if self.colorspace is Colorspace.GRAY:
            if data.ndim != 2:
                raise ParameterError(f"gray image must be 2-D, got shape {data.shape}")
        else:
            if data.ndim != 3 or data.shape[2] != 3:
                raise ParameterError(
                    f"{self.colorspace.value} image must be (H, W, 3), got shape {data.shape}"
                )
        if data.size == 0:
            raise ParameterError("empty image")
        lo, hi = float(data.min()), float(data.max())
        if lo < -1e-9 or hi > 1 + 1e-9:
            raise ParameterError(f"samples outside [0, 1]: min={lo}, max={hi}")
        data = np.clip(data, 0.0, 1.0)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.valid_mask is not None:
            mask = np.asarray(self.valid_mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ParameterError(
                    f"valid_mask shape {mask.shape} != image shape {data.shape[:2]}"
                )
            mask = mask.copy()
            mask.setflags(write=False)
            object.__setattr__(self, "valid_mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    def mask_or_full(self) -> np.ndarray:
        if self.valid_mask is not None:
            return self.valid_mask
        return np.ones(self.data.shape[:2], dtype=bool)


@dataclass(frozen=True)
class HeatMap:
    """Per-pixel tamper evidence; higher = more likely tampered (after normalization)."""

    scores: np.ndarray
    valid_mask: np.ndarray
    normalized: bool = field(default=False, compare=False)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if scores.ndim != 2:
            raise ParameterError(f"heat map must be 2-D, got shape {scores.shape}")
        if mask.shape != scores.shape:
            raise ParameterError("heat map mask shape mismatch")
        if mask.any() and not np.isfinite(scores[mask]).all():
            raise ParameterError("non-finite score on a valid pixel")
        scores = scores.copy()
        scores.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


# ---------------------------------------------------------------------------
# Colorspace conversions


def to_luma(img: Image) -> Image:
    """BT.601 weighted sum of an RGB image; output is single-channel gray."""
    if img.colorspace is Colorspace.GRAY:
        return img
    if img.colorspace is not Colorspace.RGB:
        raise ColorspaceError(f"to_luma needs RGB input, got {img.colorspace.value}")
    r, g, b = img.data[..., 0], img.data[..., 1], img.data[..., 2]
    y = _LUMA_WEIGHTS[0] * r + _LUMA_WEIGHTS[1] * g + _LUMA_WEIGHTS[2] * b
    return Image(np.clip(y, 0.0, 1.0), Colorspace.GRAY, img.valid_mask)


def rgb_to_hsv(img: Image) -> Image:
    """Hexcone HSV with all three channels in [0, 1] (hue = degrees / 360)."""
    if img.colorspace is not Colorspace.RGB:
        raise ColorspaceError(f"rgb_to_hsv needs RGB input, got {img.colorspace.value}")
    rgb = img.data
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(delta > 0, delta, 1.0)
    h = np.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / safe) % 6.0, h)
    h = np.where(is_g, (b - r) / safe + 2.0, h)
    h = np.where(is_b, (r - g) / safe + 4.0, h)
    h = h / 6.0
    hsv = np.stack([h, s, v], axis=2)
    return Image(np.clip(hsv, 0.0, 1.0), Colorspace.HSV, img.valid_mask)


def hsv_to_rgb(img: Image) -> Image:
    """Inverse hexcone conversion (hue in [0, 1] wraps)."""
    if img.colorspace is not Colorspace.HSV:
        raise ColorspaceError(f"hsv_to_rgb needs HSV input, got {img.colorspace.value}")
    h = (img.data[..., 0] % 1.0) * 6.0
    s = img.data[..., 1]
    v = img.data[..., 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    rgb = np.stack([r, g, b], axis=2)
    return Image(np.clip(rgb, 0.0, 1.0), Colorspace.RGB, img.valid_mask)


# ---------------------------------------------------------------------------
# Convolution


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian convolution with edge replication at the borders.

    Validity propagates: an output pixel whose kernel support touches an
    invalid input pixel is itself invalid.
    """
    kernel = gaussian_kernel1d(sigma)

    def blur2d(plane: np.ndarray) -> np.ndarray:
        tmp = correlate1d(plane, kernel, axis=0, mode="nearest")
        return correlate1d(tmp, kernel, axis=1, mode="nearest")

    if img.data.ndim == 2:
        out = blur2d(img.data)
    else:
        out = np.stack([blur2d(img.data[..., c]) for c in range(3)], axis=2)
    out = np.clip(out, 0.0, 1.0)

    mask = img.valid_mask
    if mask is not None:
        cover = blur2d(mask.astype(np.float64))
        mask = cover >= 1.0 - 1e-9
    return Image(out, img.colorspace, mask)


# ---------------------------------------------------------------------------
# Affine warping


def warp_affine(img: Image, matrix: np.ndarray, out_size: tuple[int, int]) -> Image:
    """Warp ``img`` by the 3x3 affine ``matrix`` into an (height, width) frame.

    The matrix maps input (source) coordinates to output coordinates; sampling
    is done by inverse mapping with bilinear interpolation.  Output pixels
    whose preimage falls outside the source (or touches an invalid source
    pixel) are invalid and set to 0.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise TransformError(f"affine matrix must be 3x3, got {m.shape}")
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) <= 1e-12:
        raise TransformError(f"singular affine transform (det={det})")
    out_h, out_w = int(out_size[0]), int(out_size[1])
    if out_h <= 0 or out_w <= 0:
        raise ParameterError(f"output size must be positive, got {out_size}")
    inv = np.linalg.inv(m)

    ys, xs = np.mgrid[0:out_h, 0:out_w]
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]

    h, w = img.data.shape[:2]
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0

    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    x0c = np.clip(x0, 0, w - 2) if w > 1 else np.zeros_like(x0)
    y0c = np.clip(y0, 0, h - 2) if h > 1 else np.zeros_like(y0)
    fx = np.where(inside, src_x - x0c, 0.0)
    fy = np.where(inside, src_y - y0c, 0.0)
    x1 = np.minimum(x0c + 1, w - 1)
    y1 = np.minimum(y0c + 1, h - 1)

    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy

    def sample(plane: np.ndarray) -> np.ndarray:
        return (
            w00 * plane[y0c, x0c]
            + w10 * plane[y0c, x1]
            + w01 * plane[y1, x0c]
            + w11 * plane[y1, x1]
        )

    if img.data.ndim == 2:
        out = sample(img.data)
    else:
        out = np.stack([sample(img.data[..., c]) for c in range(3)], axis=2)

    mask = inside.copy()
    if img.valid_mask is not None:
        cover = sample(img.valid_mask.astype(np.float64))
        mask &= cover >= 1.0 - 1e-9
    if img.data.ndim == 2:
        out[~mask] = 0.0
    else:
        out[~mask, :] = 0.0
    return Image(np.clip(out, 0.0, 1.0), img.colorspace, mask)


def rotate_about_center(img: Image, degrees: float) -> Image:
    """Rotate about the image center, same output size, uncovered pixels invalid."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    cx = (img.width - 1) / 2.0
    cy = (img.height - 1) / 2.0
    # translate(-c) @ rotate @ translate(+c)
    m = np.array(
        [
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ]
    )
    return warp_affine(img, m, (img.height, img.width))


# ---------------------------------------------------------------------------
# File I/O


def load_image(path: str | Path) -> Image:
    """Read a PNG or JPEG file into an RGB (or gray) [0, 1] image."""
    with PILImage.open(path) as pil:
        pil.load()
        if pil.mode in ("1", "L", "I", "I;16", "F"):
            if pil.mode == "I;16":
                arr = np.asarray(pil, dtype=np.float64) / 65535.0
            elif pil.mode == "I":
                arr = np.asarray(pil, dtype=np.float64)
                arr = arr / max(arr.max(), 1.0)
            elif pil.mode == "F":
                arr = np.asarray(pil, dtype=np.float64)
            else:
                arr = np.asarray(pil.convert("L"), dtype=np.float64) / 255.0
            return Image(np.clip(arr, 0.0, 1.0), Colorspace.GRAY)
        rgb = pil.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
        return Image(arr, Colorspace.RGB)


def save_image(img: Image, path: str | Path) -> None:
    """Write an image as 8-bit PNG/JPEG (by extension)."""
    arr = np.round(img.data * 255.0).astype(np.uint8)
    if img.data.ndim == 2:
        pil = PILImage.fromarray(arr, mode="L")
    else:
        if img.colorspace is not Colorspace.RGB:
            raise ColorspaceError("only RGB or gray images can be saved")
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(path)


def write_heatmap(hm: HeatMap, png_path: str | Path) -> None:
    """Write a heat map as 16-bit gray PNG plus a float32 binary sidecar.

    PNG: round(score * 65535), invalid pixels 0.  Sidecar (same path with
    ``.thm`` appended): 8-byte header (magic ``THM1``, u16 width, u16 height,
    little-endian) then row-major float32 scores with NaN at invalid pixels.
    """
    png_path = Path(png_path)
    scores = np.where(hm.valid_mask, hm.scores, 0.0)
    q = np.round(np.clip(scores, 0.0, 1.0) * 65535.0).astype("<u2")
    pil = PILImage.fromarray(q.astype(np.uint16), mode="I;16")
    pil.save(png_path)

    side = np.where(hm.valid_mask, hm.scores, np.nan).astype("<f4")
    header = _THM_MAGIC + struct.pack("<HH", hm.width, hm.height)
    with open(png_path.with_suffix(png_path.suffix + ".thm"), "wb") as fh:
        fh.write(header)
        fh.write(side.tobytes())


def read_heatmap(png_path: str | Path) -> HeatMap:
    """Read back a heat map from its float32 sidecar (lossless round trip)."""
    side = Path(str(png_path) + ".thm")
    try:
        raw = side.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing heat map sidecar: {side}") from exc
    if len(raw) < 8 or raw[:4] != _THM_MAGIC:
        raise FormatError(f"bad heat map sidecar header in {side}")
    w, h = struct.unpack("<HH", raw[4:8])
    expected = 8 + 4 * w * h
    if len(raw) != expected:
        raise FormatError(f"truncated heat map sidecar {side}: {len(raw)} != {expected} bytes")
    scores = np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).astype(np.float64)
    mask = np.isfinite(scores)
    scores = np.where(mask, scores, 0.0)
    return HeatMap(scores, mask, normalized=True)


def load_mask(path: str | Path) -> np.ndarray:
    """Read a binary tamper mask: nonzero = tampered."""
    with PILImage.open(path) as pil:
        arr = np.asarray(pil.convert("L"))
    return arr >= 128


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)
