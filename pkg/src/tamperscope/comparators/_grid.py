"""Windowed sums and stride-grid upsampling shared by the comparators."""

from __future__ import annotations

import numpy as np

__all__ = ["windowed_sum", "grid_positions", "upsample_grid"]


def windowed_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 neighborhood of every pixel, clipped at borders.

    Pixels outside the image contribute nothing (no replication), so pairing
    this with a mask gives neighborhood statistics over valid samples only.
    """
    h, w = arr.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=ii[1:, 1:])
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    r0 = np.clip(rows - radius, 0, h)
    r1 = np.clip(rows + radius + 1, 0, h)
    c0 = np.clip(cols - radius, 0, w)
    c1 = np.clip(cols + radius + 1, 0, w)
    return ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]


def grid_positions(extent: int, span: int, stride: int) -> np.ndarray:
    """Top-left positions of span-sized windows at the given stride.

    Always includes the last feasible position so the grid reaches the
    far border even when (extent - span) is not a stride multiple.
    """
    last = extent - span
    if last < 0:
        raise ValueError(f"span {span} exceeds extent {extent}")
    pos = np.arange(0, last + 1, stride)
    if pos[-1] != last:
        pos = np.append(pos, last)
    return pos


def upsample_grid(
    values: np.ndarray,
    grid_valid: np.ndarray,
    grid_rows: np.ndarray,
    grid_cols: np.ndarray,
    out_shape: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly interpolate grid samples to pixel resolution.

    ``grid_rows``/``grid_cols`` are the pixel coordinates of the grid lines
    (monotone increasing).  Pixels outside the grid hull clamp to the nearest
    line.  A pixel is valid only if every grid sample it interpolates from is
    valid.
    """
    h, w = out_shape
    ri = np.interp(np.arange(h), grid_rows, np.arange(len(grid_rows), dtype=np.float64))
    ci = np.interp(np.arange(w), grid_cols, np.arange(len(grid_cols), dtype=np.float64))
    r0 = np.floor(ri).astype(np.int64)
    c0 = np.floor(ci).astype(np.int64)
    r0 = np.minimum(r0, len(grid_rows) - 1)
    c0 = np.minimum(c0, len(grid_cols) - 1)
    r1 = np.minimum(r0 + 1, len(grid_rows) - 1)
    c1 = np.minimum(c0 + 1, len(grid_cols) - 1)
    fr = (ri - r0)[:, None]
    fc = (ci - c0)[None, :]

    v00 = values[np.ix_(r0, c0)]
    v01 = values[np.ix_(r0, c1)]
    v10 = values[np.ix_(r1, c0)]
    v11 = values[np.ix_(r1, c1)]
    out = (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )

    g00 = grid_valid[np.ix_(r0, c0)]
    g01 = grid_valid[np.ix_(r0, c1)]
    g10 = grid_valid[np.ix_(r1, c0)]
    g11 = grid_valid[np.ix_(r1, c1)]
    ok = g00 & g01 & g10 & g11
    return out, ok
