"""Generalized nearest-neighbor field over translation, rotation and scale.

Every probe patch carries a state (target center, angle, log2 scale) mapping
it onto a bilinearly-sampled patch of the candidate; its cost is the mean
squared RGB distance over valid samples.  States improve by alternating-scan
propagation (neighbor states composed with the grid offset) and per-component
exponential random search, both of which only ever accept improvements, so
per-patch cost is non-increasing.

Because the candidate is already registered onto the probe frame, each patch
is initialized with the better of the identity state and one uniform random
state; on an untampered pair the identity state is exact, which pins the
no-evidence baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ComparatorError
from ..imaging import Colorspace, HeatMap, Image
from ..rng import substream
from ._grid import grid_positions

__all__ = ["NNField", "patchmatch_nnf", "raw_patchmatch", "thm_patchmatch"]

_LOG2_SCALE_RANGE = 1.0  # scale in [0.5, 2]
_POS_WINDOW_FLOOR = 0.25  # px; random-search halving stops below this
_MAX_SAMPLE_SQ = 3.0  # largest possible per-sample squared RGB distance


@dataclass
class NNField:
    rows: np.ndarray  # patch top-left rows
    cols: np.ndarray
    tx: np.ndarray  # (GR, GC) target center x in the candidate
    ty: np.ndarray
    theta: np.ndarray
    log2s: np.ndarray
    cost: np.ndarray  # (GR, GC), inf where rejected
    trace: list[float]  # per-iteration mean of min(cost, 3)

    @property
    def scale(self) -> np.ndarray:
        return 2.0**self.log2s


class _CostEvaluator:
    def __init__(self, p: Image, c: Image, patch: int):
        self.h, self.w = c.height, c.width
        half = (patch - 1) / 2.0
        k = np.arange(patch, dtype=np.float64)
        self.off_x = np.tile(k - half, patch)
        self.off_y = np.repeat(k - half, patch)
        self.cdata = np.ascontiguousarray(c.data, dtype=np.float32)
        self.cmask = c.mask_or_full().astype(np.float32)
        self.pdata = np.ascontiguousarray(p.data, dtype=np.float32)
        self.pmask = p.mask_or_full()
        self.n_samples = patch * patch
        self.min_valid = int(np.ceil(0.75 * self.n_samples))

    def patch_values(self, rows: np.ndarray, cols: np.ndarray, patch: int):
        """Probe patch pixels and their validity for flat grid index arrays."""
        rr = rows[:, None] + (self.off_y + (patch - 1) / 2.0).astype(np.int64)[None, :]
        cc = cols[:, None] + (self.off_x + (patch - 1) / 2.0).astype(np.int64)[None, :]
        return self.pdata[rr, cc], self.pmask[rr, cc]

    def __call__(self, pvals, pvalid, tx, ty, theta, log2s):
        """Mean squared RGB sample distance; inf when > 25% of samples invalid."""
        s = np.exp2(log2s)[:, None]
        cos = np.cos(theta)[:, None]
        sin = np.sin(theta)[:, None]
        sx = tx[:, None] + s * (cos * self.off_x[None, :] - sin * self.off_y[None, :])
        sy = ty[:, None] + s * (sin * self.off_x[None, :] + cos * self.off_y[None, :])

        inb = (sx >= 0) & (sx <= self.w - 1) & (sy >= 0) & (sy <= self.h - 1)
        x0 = np.clip(np.floor(sx).astype(np.int64), 0, max(self.w - 2, 0))
        y0 = np.clip(np.floor(sy).astype(np.int64), 0, max(self.h - 2, 0))
        fx = np.where(inb, sx - x0, 0.0).astype(np.float32)
        fy = np.where(inb, sy - y0, 0.0).astype(np.float32)
        x1 = np.minimum(x0 + 1, self.w - 1)
        y1 = np.minimum(y0 + 1, self.h - 1)
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy

        cvals = w00[..., None] * self.cdata[y0, x0]
        cvals += w10[..., None] * self.cdata[y0, x1]
        cvals += w01[..., None] * self.cdata[y1, x0]
        cvals += w11[..., None] * self.cdata[y1, x1]
        cover = (
            w00 * self.cmask[y0, x0]
            + w10 * self.cmask[y0, x1]
            + w01 * self.cmask[y1, x0]
            + w11 * self.cmask[y1, x1]
        )
        ok = inb & (cover >= 1.0 - 1e-6) & pvalid
        diff = cvals - pvals
        sq = np.einsum("bkc,bkc->bk", diff, diff)
        n_ok = ok.sum(axis=1)
        total = np.where(ok, sq, 0.0).sum(axis=1, dtype=np.float64)
        return np.where(n_ok >= self.min_valid, total / np.maximum(n_ok, 1), np.inf)


def patchmatch_nnf(
    p: Image,
    c: Image,
    cfg=None,
    rng: int | np.random.Generator = 0,
) -> NNField:
    """Run the NNF search and return per-patch states, costs, and the trace."""
    from . import ComparatorConfig, _check_pair

    cfg = cfg or ComparatorConfig()
    _check_pair(p, c)
    if p.colorspace is not Colorspace.RGB or c.colorspace is not Colorspace.RGB:
        raise ComparatorError("patchmatch compares RGB images")
    patch = cfg.pm_patch
    if p.height < patch or p.width < patch:
        raise ComparatorError(f"image smaller than one {patch}x{patch} patch")
    gen = rng if isinstance(rng, np.random.Generator) else substream(int(rng), "patchmatch")

    stride = 1 if cfg.full_density else cfg.pm_stride
    rows = grid_positions(p.height, patch, stride)
    cols = grid_positions(p.width, patch, stride)
    gr, gc = len(rows), len(cols)
    half = (patch - 1) / 2.0
    cy = np.repeat(rows.astype(np.float64) + half, gc)
    cx = np.tile(cols.astype(np.float64) + half, gr)

    ev = _CostEvaluator(p, c, patch)
    flat_rows = np.repeat(rows, gc)
    flat_cols = np.tile(cols, gr)
    pvals, pvalid = ev.patch_values(flat_rows, flat_cols, patch)

    # identity initialization (images are pre-registered)...
    tx = cx.copy()
    ty = cy.copy()
    th = np.zeros(gr * gc)
    ls = np.zeros(gr * gc)
    cost = ev(pvals, pvalid, tx, ty, th, ls)
    # ...challenged by one uniform random state per patch
    rtx = gen.uniform(0, ev.w - 1, gr * gc)
    rty = gen.uniform(0, ev.h - 1, gr * gc)
    rth = gen.uniform(-np.pi, np.pi, gr * gc)
    rls = gen.uniform(-_LOG2_SCALE_RANGE, _LOG2_SCALE_RANGE, gr * gc)
    rcost = ev(pvals, pvalid, rtx, rty, rth, rls)
    better = rcost < cost
    tx[better] = rtx[better]
    ty[better] = rty[better]
    th[better] = rth[better]
    ls[better] = rls[better]
    cost[better] = rcost[better]

    idx2 = np.arange(gr * gc).reshape(gr, gc)
    trace: list[float] = []

    def try_candidates(targets: np.ndarray, ntx, nty, nth, nls):
        ncost = ev(pvals[targets], pvalid[targets], ntx, nty, nth, nls)
        win = ncost < cost[targets]
        sel = targets[win]
        tx[sel] = ntx[win]
        ty[sel] = nty[win]
        th[sel] = nth[win]
        ls[sel] = nls[win]
        cost[sel] = ncost[win]

    def propagate_from(targets: np.ndarray, sources: np.ndarray):
        s = np.exp2(ls[sources])
        cos = np.cos(th[sources])
        sin = np.sin(th[sources])
        dx = cx[targets] - cx[sources]
        dy = cy[targets] - cy[sources]
        ntx = tx[sources] + s * (cos * dx - sin * dy)
        nty = ty[sources] + s * (sin * dx + cos * dy)
        # a candidate identical to the current state cannot strictly improve
        diffstate = (
            (np.abs(ntx - tx[targets]) > 1e-12)
            | (np.abs(nty - ty[targets]) > 1e-12)
            | (th[sources] != th[targets])
            | (ls[sources] != ls[targets])
        )
        keep = diffstate | ~np.isfinite(cost[targets])
        if keep.any():
            t = targets[keep]
            try_candidates(t, ntx[keep], nty[keep], th[sources][keep], ls[sources][keep])

    n_levels = 0
    w0 = float(max(ev.h, ev.w))
    while w0 / (2.0**n_levels) >= _POS_WINDOW_FLOOR:
        n_levels += 1

    for it in range(cfg.pm_iters):
        forward = it % 2 == 0
        diag_range = range(1, gr + gc - 1) if forward else range(gr + gc - 3, -1, -1)
        for d in diag_range:
            i = np.arange(max(0, d - gc + 1), min(gr, d + 1))
            j = d - i
            targets = idx2[i, j]
            if forward:
                up = i > 0
                if up.any():
                    propagate_from(targets[up], idx2[i[up] - 1, j[up]])
                left = j > 0
                if left.any():
                    propagate_from(targets[left], idx2[i[left], j[left] - 1])
            else:
                down = i < gr - 1
                if down.any():
                    propagate_from(targets[down], idx2[i[down] + 1, j[down]])
                right = j < gc - 1
                if right.any():
                    propagate_from(targets[right], idx2[i[right], j[right] + 1])

        # random search around the current state; zero-cost patches cannot
        # improve, so they are excluded from the draw-evaluate cycle
        searchable = np.flatnonzero(cost > 0.0)
        for level in range(n_levels):
            shrink = 2.0**level
            u = gen.uniform(-1.0, 1.0, size=(4, searchable.size))
            ntx = np.clip(tx[searchable] + u[0] * (w0 / shrink), 0, ev.w - 1)
            nty = np.clip(ty[searchable] + u[1] * (w0 / shrink), 0, ev.h - 1)
            nth = th[searchable] + u[2] * (np.pi / shrink)
            nth = np.mod(nth + np.pi, 2.0 * np.pi) - np.pi
            nls = np.clip(ls[searchable] + u[3] * (_LOG2_SCALE_RANGE / shrink), -1.0, 1.0)
            try_candidates(searchable, ntx, nty, nth, nls)

        trace.append(float(np.minimum(cost, _MAX_SAMPLE_SQ).mean()))

    return NNField(
        rows,
        cols,
        tx.reshape(gr, gc),
        ty.reshape(gr, gc),
        th.reshape(gr, gc),
        ls.reshape(gr, gc),
        cost.reshape(gr, gc),
        trace,
    )


def raw_patchmatch(
    p: Image, c: Image, cfg=None, rng: int | np.random.Generator = 0
) -> HeatMap:
    """Per-pixel NNF match cost, averaged over the patches covering the pixel."""
    from . import ComparatorConfig

    cfg = cfg or ComparatorConfig()
    field = patchmatch_nnf(p, c, cfg, rng)
    patch = cfg.pm_patch
    acc = np.zeros((p.height, p.width))
    cnt = np.zeros((p.height, p.width))
    finite = np.isfinite(field.cost)
    for i, r in enumerate(field.rows):
        for j, col in enumerate(field.cols):
            if finite[i, j]:
                acc[r : r + patch, col : col + patch] += field.cost[i, j]
                cnt[r : r + patch, col : col + patch] += 1.0
    joint = p.mask_or_full() & c.mask_or_full()
    valid = (cnt > 0) & joint
    if not valid.any():
        raise ComparatorError("no probe patch found a usable match")
    raw = np.where(valid, acc / np.maximum(cnt, 1.0), 0.0)
    return HeatMap(raw, valid)


def thm_patchmatch(
    p: Image, c: Image, cfg=None, rng: int | np.random.Generator = 0
) -> HeatMap:
    from . import normalize_polarity

    return normalize_polarity(raw_patchmatch(p, c, cfg, rng), flip=False)
