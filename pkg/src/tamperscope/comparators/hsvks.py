"""HSV neighborhood distribution comparison via the two-sample KS test.

For every grid pixel, the values of each HSV channel over the local
neighborhood of the probe and of the candidate form two sample sets; the
asymptotic two-sample Kolmogorov-Smirnov p-value measures whether they come
from the same distribution.  High p (same distribution) reads as untampered.
The raw statistic works directly on the neighborhood sample values, which is
exact where a binned histogram would be lossy.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import kolmogorov

from ..errors import ComparatorError
from ..imaging import Colorspace, HeatMap, Image, rgb_to_hsv
from ._grid import upsample_grid, windowed_sum

__all__ = ["ks_2samp", "raw_hsv_ks", "thm_hsv_ks"]

MIN_SAMPLES = 8


def ks_2samp(sample_a: np.ndarray, sample_b: np.ndarray) -> tuple[float, float]:
    """Two-sample KS statistic and asymptotic p-value.

    D is the maximum gap between the two empirical CDFs over the pooled
    values; p = Pr(D >= observed) from the Kolmogorov distribution with
    effective size n_e = n1*n2/(n1+n2) and the Stephens small-sample
    correction lambda = (sqrt(n_e) + 0.12 + 0.11/sqrt(n_e)) * D.
    """
    a = np.sort(np.asarray(sample_a, dtype=np.float64))
    b = np.sort(np.asarray(sample_b, dtype=np.float64))
    n1, n2 = a.shape[0], b.shape[0]
    if n1 == 0 or n2 == 0:
        raise ComparatorError("KS test needs non-empty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / n1
    cdf_b = np.searchsorted(b, pooled, side="right") / n2
    d = float(np.abs(cdf_a - cdf_b).max())
    return d, _ks_pvalue(d, n1, n2)


def _ks_pvalue(d, n1, n2):
    ne = n1 * n2 / (n1 + n2)
    lam = (np.sqrt(ne) + 0.12 + 0.11 / np.sqrt(ne)) * d
    return np.clip(kolmogorov(lam), 0.0, 1.0)


def _batch_ks_d(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """KS statistic for a batch of equal-size sample pairs (rows)."""
    n1 = xs.shape[1]
    n2 = ys.shape[1]
    pooled = np.concatenate([xs, ys], axis=1)
    order = np.argsort(pooled, axis=1, kind="stable")
    from_x = (order < n1).astype(np.int64)
    cum_x = np.cumsum(from_x, axis=1)
    t = np.arange(1, n1 + n2 + 1)[None, :]
    diff = np.abs(cum_x / n1 - (t - cum_x) / n2)
    # CDF gaps are only well-defined after a whole tie group is consumed
    vals = np.take_along_axis(pooled, order, axis=1)
    group_end = np.ones_like(diff, dtype=bool)
    group_end[:, :-1] = vals[:, 1:] != vals[:, :-1]
    return np.where(group_end, diff, 0.0).max(axis=1)


def raw_hsv_ks(p: Image, c: Image, cfg=None) -> HeatMap:
    """Mean per-channel KS p-value over the local HSV neighborhoods."""
    from . import ComparatorConfig, _check_pair

    cfg = cfg or ComparatorConfig()
    _check_pair(p, c)
    hp = p if p.colorspace is Colorspace.HSV else rgb_to_hsv(p)
    hc = c if c.colorspace is Colorspace.HSV else rgb_to_hsv(c)

    h, w = p.height, p.width
    radius = cfg.hist_radius
    side = 2 * radius + 1
    joint = hp.mask_or_full() & hc.mask_or_full()
    counts = np.rint(windowed_sum(joint.astype(np.float64), radius)).astype(np.int64)

    stride = 1 if cfg.full_density else cfg.ks_stride
    rows = np.unique(np.append(np.arange(0, h, stride), h - 1))
    cols = np.unique(np.append(np.arange(0, w, stride), w - 1))
    gr, gc = np.meshgrid(rows, cols, indexing="ij")

    n_pt = counts[gr, gc]
    grid_valid = n_pt >= MIN_SAMPLES
    interior = (
        (gr >= radius) & (gr < h - radius) & (gc >= radius) & (gc < w - radius)
        & (n_pt == side * side)
    )
    pvals = np.zeros(gr.shape, dtype=np.float64)

    channels_p = [np.ascontiguousarray(hp.data[..., ch]) for ch in range(3)]
    channels_c = [np.ascontiguousarray(hc.data[..., ch]) for ch in range(3)]

    # fast path: full clean windows, batched per channel
    ir, ic = np.nonzero(interior)
    if ir.size:
        vr = gr[ir, ic] - radius
        vc = gc[ir, ic] - radius
        acc = np.zeros(ir.size, dtype=np.float64)
        chunk = 2048
        for ch in range(3):
            win_p = sliding_window_view(channels_p[ch], (side, side))
            win_c = sliding_window_view(channels_c[ch], (side, side))
            for lo in range(0, ir.size, chunk):
                hi_ = min(lo + chunk, ir.size)
                xs = np.sort(win_p[vr[lo:hi_], vc[lo:hi_]].reshape(hi_ - lo, -1), axis=1)
                ys = np.sort(win_c[vr[lo:hi_], vc[lo:hi_]].reshape(hi_ - lo, -1), axis=1)
                d = _batch_ks_d(xs, ys)
                acc[lo:hi_] += _ks_pvalue(d, side * side, side * side)
        pvals[ir, ic] = acc / 3.0

    # slow path: clipped or partially-masked windows, grouped by sample count
    rem = grid_valid & ~interior
    rr, rc = np.nonzero(rem)
    groups: dict[int, list[int]] = {}
    samples_p: list[np.ndarray | None] = [None] * rr.size
    samples_c: list[np.ndarray | None] = [None] * rr.size
    for i in range(rr.size):
        r0 = max(gr[rr[i], rc[i]] - radius, 0)
        r1 = min(gr[rr[i], rc[i]] + radius + 1, h)
        c0 = max(gc[rr[i], rc[i]] - radius, 0)
        c1 = min(gc[rr[i], rc[i]] + radius + 1, w)
        m = joint[r0:r1, c0:c1]
        samples_p[i] = np.stack([channels_p[ch][r0:r1, c0:c1][m] for ch in range(3)])
        samples_c[i] = np.stack([channels_c[ch][r0:r1, c0:c1][m] for ch in range(3)])
        groups.setdefault(samples_p[i].shape[1], []).append(i)
    for n, idxs in groups.items():
        for ch in range(3):
            xs = np.sort(np.stack([samples_p[i][ch] for i in idxs]), axis=1)
            ys = np.sort(np.stack([samples_c[i][ch] for i in idxs]), axis=1)
            d = _batch_ks_d(xs, ys)
            pv = _ks_pvalue(d, n, n)
            for j, i in enumerate(idxs):
                pvals[rr[i], rc[i]] += pv[j] / 3.0

    up, ok = upsample_grid(pvals, grid_valid, rows, cols, (h, w))
    valid = ok & joint
    if not valid.any():
        raise ComparatorError("no pixel has enough valid neighborhood samples")
    return HeatMap(np.where(valid, np.clip(up, 0.0, 1.0), 0.0), valid)


def thm_hsv_ks(p: Image, c: Image, cfg=None) -> HeatMap:
    from . import normalize_polarity

    return normalize_polarity(raw_hsv_ks(p, c, cfg), flip=True)
