"""Sensor-noise residual correlation.

Noise residuals are what survives subtracting a wavelet-denoised image from
itself; for near-duplicates shot by one camera they correlate strongly,
while spliced-in content carries foreign noise.  Residuals are compared by
normalized correlation on sliding blocks, upsampled to pixel resolution.

The denoiser is the classic local-Wiener-in-wavelet-domain construction:
per detail coefficient, signal variance is estimated as the minimum over
{3,5,7,9}-sized local windows of max(0, local second moment - sigma0^2) and
the coefficient is attenuated by var / (var + sigma0^2).  The transform is
an orthonormal periodized Daubechies-4.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from ..errors import ComparatorError
from ..imaging import HeatMap, Image, to_luma
from ._grid import grid_positions, upsample_grid

__all__ = [
    "raw_prnu",
    "thm_prnu",
    "noise_residual",
    "wavelet_denoise",
    "dwt2",
    "idwt2",
    "block_ncc",
]

_SQRT3 = np.sqrt(3.0)
_DEC_LO = np.array([1.0 + _SQRT3, 3.0 + _SQRT3, 3.0 - _SQRT3, 1.0 - _SQRT3]) / (4.0 * np.sqrt(2.0))
_DEC_HI = np.array([_DEC_LO[3], -_DEC_LO[2], _DEC_LO[1], -_DEC_LO[0]])
_WIENER_WINDOWS = (3, 5, 7, 9)


def _analysis_last(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[-1]
    pos = (2 * np.arange(n // 2)[:, None] + np.arange(4)[None, :]) % n
    windows = x[..., pos]
    return windows @ _DEC_LO, windows @ _DEC_HI


def _synthesis_last(approx: np.ndarray, detail: np.ndarray) -> np.ndarray:
    n = 2 * approx.shape[-1]
    out = np.zeros(approx.shape[:-1] + (n,), dtype=np.float64)
    base = 2 * np.arange(n // 2)
    for k in range(4):
        np.add.at(out, (..., (base + k) % n), approx * _DEC_LO[k] + detail * _DEC_HI[k])
    return out


def dwt2(plane: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One periodized 2-D level: (LL, (LH, HL, HH)). Both sides must be even."""
    lo, hi = _analysis_last(plane)  # along columns
    ll, lh = _analysis_last(np.swapaxes(lo, -1, -2))
    hl, hh = _analysis_last(np.swapaxes(hi, -1, -2))
    return (
        np.swapaxes(ll, -1, -2),
        (np.swapaxes(lh, -1, -2), np.swapaxes(hl, -1, -2), np.swapaxes(hh, -1, -2)),
    )


def idwt2(ll: np.ndarray, details: tuple[np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    lh, hl, hh = details
    lo = np.swapaxes(_synthesis_last(np.swapaxes(ll, -1, -2), np.swapaxes(lh, -1, -2)), -1, -2)
    hi = np.swapaxes(_synthesis_last(np.swapaxes(hl, -1, -2), np.swapaxes(hh, -1, -2)), -1, -2)
    return _synthesis_last(lo, hi)


def _wiener_detail(coef: np.ndarray, sigma0_sq: float) -> np.ndarray:
    energy = coef * coef
    var = None
    for w in _WIENER_WINDOWS:
        est = np.maximum(uniform_filter(energy, size=w, mode="nearest") - sigma0_sq, 0.0)
        var = est if var is None else np.minimum(var, est)
    return coef * (var / (var + sigma0_sq))


def wavelet_denoise(plane: np.ndarray, levels: int = 4, sigma0: float = 3.0 / 255.0) -> np.ndarray:
    """Local-Wiener wavelet denoising; input is a [0, 1] luminance plane."""
    h, w = plane.shape
    unit = 1 << levels
    ph = (unit - h % unit) % unit
    pw = (unit - w % unit) % unit
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge")

    sigma0_sq = sigma0 * sigma0
    approx = padded
    stack = []
    for _ in range(levels):
        if min(approx.shape) < 4 or approx.shape[0] % 2 or approx.shape[1] % 2:
            break
        approx, details = dwt2(approx)
        stack.append(tuple(_wiener_detail(d, sigma0_sq) for d in details))
    for details in reversed(stack):
        approx = idwt2(approx, details)
    return approx[:h, :w]


def noise_residual(plane: np.ndarray, levels: int = 4, sigma0: float = 3.0 / 255.0) -> np.ndarray:
    return plane - wavelet_denoise(plane, levels, sigma0)


def _block_sums(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray, block: int) -> np.ndarray:
    h, w = arr.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=ii[1:, 1:])
    r0 = rows[:, None]
    c0 = cols[None, :]
    return ii[r0 + block, c0 + block] - ii[r0, c0 + block] - ii[r0 + block, c0] + ii[r0, c0]


def block_ncc(
    rp: np.ndarray, rc: np.ndarray, block: int, stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized correlation of two residual planes on sliding blocks.

    Returns (ncc grid, block top-left rows, block top-left cols); blocks with
    zero residual energy on either side correlate to 0.
    """
    rows = grid_positions(rp.shape[0], block, stride)
    cols = grid_positions(rp.shape[1], block, stride)
    num = _block_sums(rp * rc, rows, cols, block)
    ep = _block_sums(rp * rp, rows, cols, block)
    ec = _block_sums(rc * rc, rows, cols, block)
    den = np.sqrt(ep) * np.sqrt(ec)
    ncc = np.where(den > 1e-20, num / np.where(den > 1e-20, den, 1.0), 0.0)
    return ncc, rows, cols


def raw_prnu(p: Image, c: Image, cfg=None) -> HeatMap:
    """Per-block normalized correlation of the two noise residuals.

    Blocks slide at the configured stride; the block grid is bilinearly
    upsampled to pixel resolution.  High raw values mean shared sensor noise.
    """
    from . import ComparatorConfig, _check_pair

    cfg = cfg or ComparatorConfig()
    _check_pair(p, c)
    block = cfg.prnu_block
    if p.height < block or p.width < block:
        raise ComparatorError(
            f"image {p.width}x{p.height} smaller than one {block}x{block} block"
        )

    lp = to_luma(p)
    lc = to_luma(c)
    joint = lp.mask_or_full() & lc.mask_or_full()
    if not joint.any():
        raise ComparatorError("images share no valid overlap")

    # Fill invalid pixels from the other image (or mid-gray) before denoising
    # so the valid/invalid boundary does not read as a synthetic edge.
    base = np.where(lp.mask_or_full(), lp.data, np.where(lc.mask_or_full(), lc.data, 0.5))
    pf = np.where(lp.mask_or_full(), lp.data, base)
    cf = np.where(lc.mask_or_full(), lc.data, base)

    rp = noise_residual(pf, cfg.prnu_wavelet_levels, cfg.prnu_sigma0)
    rc = noise_residual(cf, cfg.prnu_wavelet_levels, cfg.prnu_sigma0)
    rp = np.where(joint, rp, 0.0)
    rc = np.where(joint, rc, 0.0)

    stride = 1 if cfg.full_density else cfg.prnu_stride
    ncc, rows, cols = block_ncc(rp, rc, block, stride)

    centers_r = rows + (block - 1) / 2.0
    centers_c = cols + (block - 1) / 2.0
    up, _ = upsample_grid(ncc, np.ones_like(ncc, dtype=bool), centers_r, centers_c, (p.height, p.width))
    return HeatMap(np.where(joint, up, 0.0), joint)


def thm_prnu(p: Image, c: Image, cfg=None) -> HeatMap:
    from . import normalize_polarity

    return normalize_polarity(raw_prnu(p, c, cfg), flip=True)
