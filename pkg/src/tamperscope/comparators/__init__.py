"""Probe-vs-candidate comparison algorithms.

Five algorithms, each reducing an aligned image pair to a tampering heat
map in a unified polarity (higher = more likely tampered) over the valid
overlap region:

* ``irpsnr``      log-PSNR of Gaussian-blurred residuals
* ``prnu``        block correlation of wavelet noise residuals
* ``ssim``        local structural similarity
* ``hsvks``       per-channel HSV two-sample Kolmogorov-Smirnov p-values
* ``patchmatch``  generalized nearest-neighbor-field match cost

Each ``thm_*`` function returns the normalized map; the ``raw_*`` variants
return the un-normalized evidence in the algorithm's native polarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ComparatorError, ParameterError
from ..imaging import HeatMap, Image, gaussian_blur, to_luma
from ._grid import windowed_sum

__all__ = [
    "ComparatorConfig",
    "normalize_polarity",
    "thm_irpsnr",
    "thm_prnu",
    "thm_ssim",
    "thm_hsv_ks",
    "thm_patchmatch",
    "raw_irpsnr",
    "raw_ssim",
    "COMPARATORS",
    "by_name",
]

SSIM_DYNAMIC_RANGE = 1.0  # samples are stored in [0, 1]


@dataclass(frozen=True)
class ComparatorConfig:
    sigma_g: float = 4.0  # blur for the PSNR residual
    prnu_block: int = 64
    ssim_radius: int = 32
    hist_radius: int = 13
    pm_patch: int = 8
    pm_iters: int = 20
    prnu_wavelet_levels: int = 4
    prnu_sigma0: float = 3.0 / 255.0
    # grid strides; full_density evaluates every pixel instead
    prnu_stride: int = 8
    ks_stride: int = 4
    pm_stride: int = 4
    full_density: bool = False

    def __post_init__(self):
        for name in (
            "sigma_g",
            "prnu_block",
            "ssim_radius",
            "hist_radius",
            "pm_patch",
            "pm_iters",
            "prnu_wavelet_levels",
            "prnu_sigma0",
            "prnu_stride",
            "ks_stride",
            "pm_stride",
        ):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be strictly positive")


def _check_pair(p: Image, c: Image) -> None:
    if (p.height, p.width) != (c.height, c.width):
        raise ComparatorError(
            f"image dimensions differ: {p.width}x{p.height} vs {c.width}x{c.height}"
        )


def normalize_polarity(raw: HeatMap, flip: bool) -> HeatMap:
    """Optional negation then min-max rescale of valid scores to [0, 1].

    Constant maps (no evidence either way) become all 0.5.
    """
    if not raw.valid_mask.any():
        raise ComparatorError("heat map has no valid pixels to normalize")
    scores = -raw.scores if flip else raw.scores
    vals = scores[raw.valid_mask]
    lo = float(vals.min())
    hi = float(vals.max())
    if hi - lo <= 0.0:
        out = np.full_like(scores, 0.5)
    else:
        out = (scores - lo) / (hi - lo)
    out = np.where(raw.valid_mask, np.clip(out, 0.0, 1.0), 0.0)
    return HeatMap(out, raw.valid_mask, normalized=True)


# ---------------------------------------------------------------------------
# 1. PSNR of the Gaussian image residual


def raw_irpsnr(p: Image, c: Image, cfg: ComparatorConfig = ComparatorConfig()) -> HeatMap:
    """log10(1 / (blur-residual^2 + 1)) per pixel; 0 where images agree."""
    _check_pair(p, c)
    gp = gaussian_blur(to_luma(p), cfg.sigma_g)
    gc = gaussian_blur(to_luma(c), cfg.sigma_g)
    diff = gp.data - gc.data
    raw = -np.log10(diff * diff + 1.0)
    valid = gp.mask_or_full() & gc.mask_or_full()
    return HeatMap(np.where(valid, raw, 0.0), valid)


def thm_irpsnr(p: Image, c: Image, cfg: ComparatorConfig = ComparatorConfig()) -> HeatMap:
    return normalize_polarity(raw_irpsnr(p, c, cfg), flip=True)


# ---------------------------------------------------------------------------
# 3. Structural similarity


def raw_ssim(p: Image, c: Image, cfg: ComparatorConfig = ComparatorConfig()) -> HeatMap:
    """Local SSIM over a uniform box window, population statistics.

    Neighborhood statistics are restricted to valid samples (windows clip at
    image borders), so output validity equals the joint input validity.
    """
    _check_pair(p, c)
    lp = to_luma(p)
    lc = to_luma(c)
    valid = lp.mask_or_full() & lc.mask_or_full()
    m = valid.astype(np.float64)
    x = lp.data * m
    y = lc.data * m

    r = cfg.ssim_radius
    n = windowed_sum(m, r)
    n_safe = np.where(n > 0, n, 1.0)
    mu_x = windowed_sum(x, r) / n_safe
    mu_y = windowed_sum(y, r) / n_safe
    var_x = np.maximum(windowed_sum(x * x, r) / n_safe - mu_x * mu_x, 0.0)
    var_y = np.maximum(windowed_sum(y * y, r) / n_safe - mu_y * mu_y, 0.0)
    cov = windowed_sum(x * y, r) / n_safe - mu_x * mu_y

    c1 = (0.01 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (0.03 * SSIM_DYNAMIC_RANGE) ** 2
    a = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    b = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    raw = a / b
    return HeatMap(np.where(valid, raw, 0.0), valid)


def thm_ssim(p: Image, c: Image, cfg: ComparatorConfig = ComparatorConfig()) -> HeatMap:
    return normalize_polarity(raw_ssim(p, c, cfg), flip=True)


# imported late: the submodules use _check_pair / normalize_polarity
from .prnu import raw_prnu, thm_prnu  # noqa: E402
from .hsvks import raw_hsv_ks, thm_hsv_ks  # noqa: E402
from .patchmatch import raw_patchmatch, thm_patchmatch  # noqa: E402

COMPARATORS = {
    "irpsnr": thm_irpsnr,
    "prnu": thm_prnu,
    "ssim": thm_ssim,
    "hsvks": thm_hsv_ks,
    "patchmatch": thm_patchmatch,
}


def by_name(name: str):
    try:
        return COMPARATORS[name]
    except KeyError:
        raise ParameterError(
            f"unknown comparator {name!r}; choose from {sorted(COMPARATORS)}"
        ) from None
