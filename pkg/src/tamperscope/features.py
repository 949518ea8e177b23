"""Interest-point detection and 64-d descriptors.

Fast-Hessian blob detector on an integral image (box-filter approximation
of the Hessian determinant across three octaves), followed by Haar-wavelet
dominant orientation and a 4x4-subregion descriptor of
(sum dx, sum dy, sum |dx|, sum |dy|), L2-normalized to 64 dims.

The detector/descriptor is pluggable behind ``detect_and_describe``; what
downstream code relies on is the contract: at most ``max_points`` keypoints,
unit-norm 64-d vectors, tolerance to rotation, scale and brightness shifts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import FeatureError, DegenerateImageWarning
from .imaging import Colorspace, Image, to_luma

__all__ = [
    "Keypoint",
    "Descriptor",
    "detect_and_describe",
    "RECORD_DTYPE",
    "pack_descriptors",
    "unpack_descriptors",
]

MIN_IMAGE_SIDE = 64

# Filter side lengths per octave; successive octaves double the step.
_OCTAVE_FILTERS = (
    (9, 15, 21, 27),
    (15, 27, 39, 51),
    (27, 51, 75, 99),
)
_DXY_WEIGHT = 0.9
_SCALE_PER_FILTER = 1.2 / 9.0  # blob scale of the 9x9 base filter is 1.2


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float  # radians in [-pi, pi)
    response: float


@dataclass(frozen=True)
class Descriptor:
    vector: np.ndarray  # (64,) float32, unit L2 norm
    keypoint: Keypoint
    image_id: int = 0


# Flat binary record layout shared with the index file format.
RECORD_DTYPE = np.dtype(
    [
        ("image_id", "<u8"),
        ("x", "<f4"),
        ("y", "<f4"),
        ("scale", "<f4"),
        ("orientation", "<f4"),
        ("response", "<f4"),
        ("vector", "<f4", (64,)),
    ]
)


def pack_descriptors(descs: list[Descriptor]) -> np.ndarray:
    out = np.zeros(len(descs), dtype=RECORD_DTYPE)
    for i, d in enumerate(descs):
        k = d.keypoint
        out[i] = (d.image_id, k.x, k.y, k.scale, k.orientation, k.response, d.vector)
    return out


def unpack_descriptors(records: np.ndarray) -> list[Descriptor]:
    descs = []
    for rec in records:
        kp = Keypoint(
            float(rec["x"]),
            float(rec["y"]),
            float(rec["scale"]),
            float(rec["orientation"]),
            float(rec["response"]),
        )
        descs.append(Descriptor(np.array(rec["vector"], dtype=np.float32), kp, int(rec["image_id"])))
    return descs


# ---------------------------------------------------------------------------
# Integral-image machinery


def _integral(gray: np.ndarray) -> np.ndarray:
    ii = np.zeros((gray.shape[0] + 1, gray.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(gray, axis=0), axis=1, out=ii[1:, 1:])
    return ii


def _interior_box(ii: np.ndarray, m: int, dr0: int, dr1: int, dc0: int, dc1: int) -> np.ndarray:
    """Box sums over rows r+dr0..r+dr1, cols c+dc0..c+dc1 (inclusive) for every
    interior center (r, c) with margin ``m``.  Requires -m <= d0 <= d1 <= m."""
    h = ii.shape[0] - 1
    w = ii.shape[1] - 1
    a = ii[m + dr1 + 1 : h - m + dr1 + 1, m + dc1 + 1 : w - m + dc1 + 1]
    b = ii[m + dr0 : h - m + dr0, m + dc1 + 1 : w - m + dc1 + 1]
    c = ii[m + dr1 + 1 : h - m + dr1 + 1, m + dc0 : w - m + dc0]
    d = ii[m + dr0 : h - m + dr0, m + dc0 : w - m + dc0]
    return a - b - c + d


def _hessian_layer(ii: np.ndarray, filt: int) -> np.ndarray:
    """Dense determinant-of-Hessian map for one box-filter size (0 at borders)."""
    h = ii.shape[0] - 1
    w = ii.shape[1] - 1
    half = (filt - 1) // 2
    lobe = filt // 3
    lh = (lobe - 1) // 2
    det = np.zeros((h, w), dtype=np.float64)
    if h < filt + 2 or w < filt + 2:
        return det
    m = half
    inv_area = 1.0 / (filt * filt)

    # Dyy: lobes stacked along y -> full (filt x 2lobe-1) box minus 3x the
    # middle horizontal lobe; Dxx is the transpose.
    dyy = _interior_box(ii, m, -half, half, -(lobe - 1), lobe - 1) - 3.0 * _interior_box(
        ii, m, -lh, lh, -(lobe - 1), lobe - 1
    )
    dxx = _interior_box(ii, m, -(lobe - 1), lobe - 1, -half, half) - 3.0 * _interior_box(
        ii, m, -(lobe - 1), lobe - 1, -lh, lh
    )
    dxy = (
        _interior_box(ii, m, -lobe, -1, 1, lobe)
        + _interior_box(ii, m, 1, lobe, -lobe, -1)
        - _interior_box(ii, m, -lobe, -1, -lobe, -1)
        - _interior_box(ii, m, 1, lobe, 1, lobe)
    )
    dxx *= inv_area
    dyy *= inv_area
    dxy *= inv_area
    det[m : h - m, m : w - m] = dxx * dyy - (_DXY_WEIGHT * dxy) ** 2
    return det


def _quadratic_offsets(stack: np.ndarray, li: np.ndarray, yi: np.ndarray, xi: np.ndarray):
    """Sub-pixel (layer, y, x) offsets from a 3-D quadratic fit, clamped to 0.5."""
    f = stack
    gl = (f[li + 1, yi, xi] - f[li - 1, yi, xi]) / 2.0
    gy = (f[li, yi + 1, xi] - f[li, yi - 1, xi]) / 2.0
    gx = (f[li, yi, xi + 1] - f[li, yi, xi - 1]) / 2.0
    c = f[li, yi, xi]
    hll = f[li + 1, yi, xi] + f[li - 1, yi, xi] - 2 * c
    hyy = f[li, yi + 1, xi] + f[li, yi - 1, xi] - 2 * c
    hxx = f[li, yi, xi + 1] + f[li, yi, xi - 1] - 2 * c
    hly = (f[li + 1, yi + 1, xi] - f[li + 1, yi - 1, xi] - f[li - 1, yi + 1, xi] + f[li - 1, yi - 1, xi]) / 4.0
    hlx = (f[li + 1, yi, xi + 1] - f[li + 1, yi, xi - 1] - f[li - 1, yi, xi + 1] + f[li - 1, yi, xi - 1]) / 4.0
    hyx = (f[li, yi + 1, xi + 1] - f[li, yi + 1, xi - 1] - f[li, yi - 1, xi + 1] + f[li, yi - 1, xi - 1]) / 4.0

    n = li.shape[0]
    hess = np.empty((n, 3, 3))
    hess[:, 0, 0] = hll
    hess[:, 1, 1] = hyy
    hess[:, 2, 2] = hxx
    hess[:, 0, 1] = hess[:, 1, 0] = hly
    hess[:, 0, 2] = hess[:, 2, 0] = hlx
    hess[:, 1, 2] = hess[:, 2, 1] = hyx
    grad = np.stack([gl, gy, gx], axis=1)

    offsets = np.zeros_like(grad)
    dets = np.linalg.det(hess)
    solvable = np.abs(dets) > 1e-30
    if solvable.any():
        sol = np.linalg.solve(hess[solvable], grad[solvable][..., None])
        offsets[solvable] = -sol[..., 0]
    return np.clip(offsets, -0.5, 0.5)


def _detect(gray: np.ndarray, max_points: int, hessian_threshold: float) -> np.ndarray:
    """Return keypoint array (x, y, scale, response), strongest first."""
    ii = _integral(gray)
    h, w = gray.shape
    layer_cache: dict[int, np.ndarray] = {}
    found: list[np.ndarray] = []

    for filters in _OCTAVE_FILTERS:
        usable = [f for f in filters if f + 2 <= min(h, w)]
        if len(usable) < 3:
            continue
        for f in usable:
            if f not in layer_cache:
                layer_cache[f] = _hessian_layer(ii, f)
        stack = np.stack([layer_cache[f] for f in usable])
        maxed = maximum_filter(stack, size=(3, 3, 3), mode="constant", cval=0.0)
        peak = (stack == maxed) & (stack > hessian_threshold)
        peak[0] = False
        peak[-1] = False
        peak[:, :1, :] = False
        peak[:, -1:, :] = False
        peak[:, :, :1] = False
        peak[:, :, -1:] = False
        li, yi, xi = np.nonzero(peak)
        if li.size == 0:
            continue
        offsets = _quadratic_offsets(stack, li, yi, xi)
        scales = np.array([_SCALE_PER_FILTER * f for f in usable])
        # layer spacing is uniform within an octave
        dscale = scales[1] - scales[0]
        kp_scale = scales[li] + offsets[:, 0] * dscale
        kp_y = yi + offsets[:, 1]
        kp_x = xi + offsets[:, 2]
        kp_resp = stack[li, yi, xi]
        found.append(np.stack([kp_x, kp_y, kp_scale, kp_resp], axis=1))

    if not found:
        return np.zeros((0, 4))
    pts = np.vstack(found)
    # octaves share filter sizes; drop duplicate detections at the same site
    key = np.round(pts[:, :3] * 2.0).astype(np.int64)
    _, uniq = np.unique(key, axis=0, return_index=True)
    pts = pts[np.sort(uniq)]
    # strongest first, ties broken by (y, x) for determinism
    order = np.lexsort((pts[:, 0], pts[:, 1], -pts[:, 3]))
    return pts[order[:max_points]]


# ---------------------------------------------------------------------------
# Haar responses (vectorized gathers on the integral image)


def _haar_xy(ii: np.ndarray, px: np.ndarray, py: np.ndarray, half: np.ndarray):
    """Axis-aligned Haar responses of side 2*half at integer positions.

    Out-of-bounds filters contribute exactly 0, which keeps responses
    invariant to constant brightness shifts.
    """
    h = ii.shape[0] - 1
    w = ii.shape[1] - 1
    ok = (py - half >= 0) & (py + half <= h) & (px - half >= 0) & (px + half <= w)
    pxc = np.clip(px, half, np.maximum(w - half, half))
    pyc = np.clip(py, half, np.maximum(h - half, half))

    def box(r0, c0, r1, c1):
        return ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]

    top, bot = pyc - half, pyc + half
    left, right = pxc - half, pxc + half
    dx = box(top, pxc, bot, right) - box(top, left, bot, pxc)
    dy = box(pyc, left, bot, right) - box(top, left, pyc, right)
    dx = np.where(ok, dx, 0.0)
    dy = np.where(ok, dy, 0.0)
    return dx, dy


_ORI_OFFSETS = np.array(
    [(i, j) for i in range(-6, 7) for j in range(-6, 7) if i * i + j * j <= 36],
    dtype=np.float64,
)
_ORI_GAUSS = np.exp(-(_ORI_OFFSETS[:, 0] ** 2 + _ORI_OFFSETS[:, 1] ** 2) / (2.0 * 2.5**2))
_N_ORI_WINDOWS = 42


def _orientations(ii: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Dominant orientation per keypoint via a sliding 60-degree window."""
    x, y, s = pts[:, 0:1], pts[:, 1:2], pts[:, 2:3]
    px = np.round(x + _ORI_OFFSETS[None, :, 0] * s).astype(np.int64)
    py = np.round(y + _ORI_OFFSETS[None, :, 1] * s).astype(np.int64)
    half = np.maximum(np.round(2.0 * s).astype(np.int64), 1)
    half = np.broadcast_to(half, px.shape)
    dx, dy = _haar_xy(ii, px, py, half)
    dx = dx * _ORI_GAUSS[None, :]
    dy = dy * _ORI_GAUSS[None, :]
    phi = np.arctan2(dy, dx)

    best_norm = np.zeros(pts.shape[0])
    best_ang = np.zeros(pts.shape[0])
    for k in range(_N_ORI_WINDOWS):
        ang1 = -np.pi + k * (2.0 * np.pi / _N_ORI_WINDOWS)
        in_win = ((phi - ang1) % (2.0 * np.pi)) < (np.pi / 3.0)
        sx = np.where(in_win, dx, 0.0).sum(axis=1)
        sy = np.where(in_win, dy, 0.0).sum(axis=1)
        norm = sx * sx + sy * sy
        better = norm > best_norm
        best_norm = np.where(better, norm, best_norm)
        best_ang = np.where(better, np.arctan2(sy, sx), best_ang)
    return best_ang


# 4x4 subregions x 5x5 samples, coordinates in keypoint-scale units.
_DESC_UV = np.array(
    [
        (a * 5 + p - 9.5, b * 5 + q - 9.5)
        for b in range(4)
        for a in range(4)
        for q in range(5)
        for p in range(5)
    ],
    dtype=np.float64,
)
_DESC_GAUSS = np.exp(-(_DESC_UV[:, 0] ** 2 + _DESC_UV[:, 1] ** 2) / (2.0 * 3.3**2))


def _descriptors(ii: np.ndarray, pts: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """64-d descriptor per keypoint (rows may be all-zero for flat patches)."""
    x, y, s = pts[:, 0:1], pts[:, 1:2], pts[:, 2:3]
    cos_t = np.cos(angles)[:, None]
    sin_t = np.sin(angles)[:, None]
    u = _DESC_UV[None, :, 0]
    v = _DESC_UV[None, :, 1]
    sample_x = np.round(x + s * (u * cos_t - v * sin_t)).astype(np.int64)
    sample_y = np.round(y + s * (u * sin_t + v * cos_t)).astype(np.int64)
    half = np.maximum(np.round(s).astype(np.int64), 1)
    half = np.broadcast_to(half, sample_x.shape)
    dx, dy = _haar_xy(ii, sample_x, sample_y, half)
    # rotate responses into the keypoint frame
    rx = cos_t * dx + sin_t * dy
    ry = -sin_t * dx + cos_t * dy
    rx = rx * _DESC_GAUSS[None, :]
    ry = ry * _DESC_GAUSS[None, :]

    n = pts.shape[0]
    rx = rx.reshape(n, 16, 25)
    ry = ry.reshape(n, 16, 25)
    parts = np.stack(
        [rx.sum(axis=2), ry.sum(axis=2), np.abs(rx).sum(axis=2), np.abs(ry).sum(axis=2)],
        axis=2,
    )
    vec = parts.reshape(n, 64)
    norms = np.linalg.norm(vec, axis=1, keepdims=True)
    safe = np.where(norms > 1e-12, norms, 1.0)
    vec = vec / safe
    vec[norms[:, 0] <= 1e-12] = 0.0
    return vec


def detect_and_describe(
    img: Image,
    max_points: int = 500,
    *,
    upright: bool = False,
    hessian_threshold: float = 3e-5,
    image_id: int = 0,
) -> list[Descriptor]:
    """Detect up to ``max_points`` keypoints and describe each with 64 dims.

    Degenerate flat patches (zero descriptor norm) are discarded.  Finding
    fewer than 8 keypoints emits a DegenerateImageWarning; the image is
    still usable for indexing.
    """
    if img.height < MIN_IMAGE_SIDE or img.width < MIN_IMAGE_SIDE:
        raise FeatureError(
            f"image {img.width}x{img.height} below minimum {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
        )
    gray = img if img.colorspace is Colorspace.GRAY else to_luma(img)
    plane = gray.data

    pts = _detect(plane, max_points, hessian_threshold)
    if pts.shape[0] == 0:
        return []
    ii = _integral(plane)
    angles = np.zeros(pts.shape[0]) if upright else _orientations(ii, pts)
    vectors = _descriptors(ii, pts, angles)

    descs: list[Descriptor] = []
    for i in range(pts.shape[0]):
        vec = vectors[i]
        if not vec.any():
            continue
        kp = Keypoint(
            float(pts[i, 0]),
            float(pts[i, 1]),
            float(pts[i, 2]),
            float(np.arctan2(np.sin(angles[i]), np.cos(angles[i]))),
            float(pts[i, 3]),
        )
        descs.append(Descriptor(vec.astype(np.float32), kp, image_id))
    if len(descs) < 8:
        warnings.warn(
            f"image yielded only {len(descs)} keypoints; retrieval may be unreliable",
            DegenerateImageWarning,
            stacklevel=2,
        )
    return descs
