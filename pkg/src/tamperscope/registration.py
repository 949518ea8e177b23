"""Candidate-to-probe registration: matching, MSAC, conditioning rank, warp.

Each retrieved image is registered to the probe by brute-force descriptor
matching followed by MSAC affine estimation.  Candidates are ranked by the
reciprocal Frobenius condition of their transform (1 / (||F|| * ||F^-1||));
the top-ranked candidate is warped into the probe frame for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateGeometryError,
    NoContextError,
    ParameterError,
    RegistrationInfeasibleError,
    TransformError,
)
from .features import Descriptor
from .imaging import Image, warp_affine
from .rng import substream

__all__ = [
    "AffineTransform",
    "RankedCandidate",
    "match_descriptors",
    "estimate_affine_msac",
    "rfn",
    "select_and_warp",
]

LOWE_RATIO = 0.8


@dataclass(frozen=True)
class AffineTransform:
    """3x3 matrix with last row (0, 0, 1), mapping source to target coordinates."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise TransformError(f"affine matrix must be 3x3, got {m.shape}")
        if not np.array_equal(m[2], (0.0, 0.0, 1.0)):
            raise TransformError(f"last affine row must be (0, 0, 1), got {m[2]}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3))

    def inverse(self) -> "AffineTransform":
        a, b, c, d = self.m[0, 0], self.m[0, 1], self.m[1, 0], self.m[1, 1]
        det = a * d - b * c
        if abs(det) <= 1e-12:
            raise TransformError("cannot invert a singular affine transform")
        inv2 = np.array([[d, -b], [-c, a]]) / det
        out = np.eye(3)
        out[:2, :2] = inv2
        out[:2, 2] = -inv2 @ self.m[:2, 2]
        return AffineTransform(out)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.m[:2, :2].T + self.m[:2, 2]


@dataclass(frozen=True)
class RankedCandidate:
    image_id: int
    transform: AffineTransform
    rfn: float
    inlier_count: int


def rfn(transform: AffineTransform | np.ndarray) -> float:
    """Reciprocal Frobenius condition; 0 for singular (unusable) transforms."""
    m = transform.m if isinstance(transform, AffineTransform) else np.asarray(transform, float)
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        return 0.0
    denom = np.linalg.norm(m) * np.linalg.norm(inv)
    if not np.isfinite(denom) or denom <= 0:
        return 0.0
    return float(1.0 / denom)


def match_descriptors(
    a: Sequence[Descriptor], b: Sequence[Descriptor], *, ratio: float = LOWE_RATIO
) -> list[tuple[int, int]]:
    """Mutual nearest neighbors passing the Lowe ratio, by brute-force L2.

    Raises RegistrationInfeasibleError (carrying the partial list) when fewer
    than 3 pairs survive, since no affine can be estimated from them.
    """
    va = _vectors_of(a)
    vb = _vectors_of(b)
    if va.shape[0] == 0 or vb.shape[0] == 0:
        raise RegistrationInfeasibleError("empty descriptor list", [])

    d2 = _sq_distances(va, vb)
    fwd = np.argmin(d2, axis=1)
    bwd = np.argmin(d2, axis=0)

    pairs: list[tuple[int, int]] = []
    if vb.shape[0] >= 2:
        two = np.partition(d2, 1, axis=1)[:, :2]
        best = np.sqrt(np.maximum(two[:, 0], 0.0))
        second = np.sqrt(np.maximum(two[:, 1], 0.0))
    else:
        best = np.sqrt(np.maximum(d2[:, 0], 0.0))
        second = np.full(va.shape[0], np.inf)
    for i in range(va.shape[0]):
        j = int(fwd[i])
        if int(bwd[j]) != i:
            continue
        if not best[i] < ratio * second[i]:
            continue
        pairs.append((i, j))
    if len(pairs) < 3:
        raise RegistrationInfeasibleError(
            f"only {len(pairs)} matches survive the ratio test; need >= 3", pairs
        )
    return pairs


def _vectors_of(descs) -> np.ndarray:
    if isinstance(descs, np.ndarray):
        return np.asarray(descs, dtype=np.float32).reshape(-1, 64)
    return np.asarray([d.vector for d in descs], dtype=np.float32).reshape(-1, 64)


def _sq_distances(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    aa = (va.astype(np.float64) ** 2).sum(axis=1)[:, None]
    bb = (vb.astype(np.float64) ** 2).sum(axis=1)[None, :]
    cross = va.astype(np.float64) @ vb.astype(np.float64).T
    return np.maximum(aa + bb - 2.0 * cross, 0.0)


def _solve_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Exact 6-dof affine from 3 correspondences; None when collinear."""
    p0, p1, p2 = src
    area2 = abs((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]))
    if area2 <= 1e-9:
        return None
    a = np.column_stack([src, np.ones(3)])
    try:
        x = np.linalg.solve(a, dst)
    except np.linalg.LinAlgError:
        return None
    f = np.eye(3)
    f[0, :] = x[:, 0]
    f[1, :] = x[:, 1]
    return f


def _transfer_sq_errors(f: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    proj = src @ f[:2, :2].T + f[:2, 2]
    diff = proj - dst
    return (diff * diff).sum(axis=1)


def estimate_affine_msac(
    matches: Sequence[tuple[int, int]],
    pts_src: np.ndarray,
    pts_dst: np.ndarray,
    tau: float = 3.0,
    max_iters: int = 2000,
    confidence: float = 0.99,
    rng: int | np.random.Generator = 0,
) -> tuple[AffineTransform, np.ndarray]:
    """MSAC estimate of the affine mapping source points onto target points.

    Hypotheses come from 3 random non-collinear correspondences; each is
    scored by the truncated squared forward transfer error sum(min(e^2, tau^2)).
    The iteration budget adapts to the best inlier ratio (capped at
    ``max_iters``) and the winning model is refit by least squares on its
    inliers (e < tau).  Returns the transform and the final inlier mask.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    matches = list(matches)
    if len(matches) < 3:
        raise RegistrationInfeasibleError(
            f"{len(matches)} matches; need >= 3 for an affine", matches
        )
    if isinstance(rng, np.random.Generator):
        gen = rng
    else:
        gen = substream(int(rng), "msac")

    idx = np.asarray(matches, dtype=np.int64)
    src = np.asarray(pts_src, dtype=np.float64).reshape(-1, 2)[idx[:, 0]]
    dst = np.asarray(pts_dst, dtype=np.float64).reshape(-1, 2)[idx[:, 1]]
    n = src.shape[0]
    tau2 = tau * tau

    best_cost = np.inf
    best_f: np.ndarray | None = None
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        sample = gen.choice(n, size=3, replace=False)
        f = _solve_affine(src[sample], dst[sample])
        if f is None:
            continue
        e2 = _transfer_sq_errors(f, src, dst)
        cost = float(np.minimum(e2, tau2).sum())
        if cost < best_cost:
            best_cost = cost
            best_f = f
            w = float((e2 < tau2).mean())
            if w > 0:
                denom = np.log1p(-min(w**3, 1.0 - 1e-12))
                needed = int(np.ceil(np.log(1.0 - confidence) / denom)) if denom < 0 else max_iters
    if best_f is None:
        raise DegenerateGeometryError(
            f"no non-collinear correspondence sample found in {it} iterations"
        )

    # least-squares refit, iterated until the inlier set stabilizes (the set
    # is defined by the model, so a single pass can leave true inliers out)
    inliers = _transfer_sq_errors(best_f, src, dst) < tau2
    for _ in range(10):
        if inliers.sum() < 3:
            break
        a = np.column_stack([src[inliers], np.ones(int(inliers.sum()))])
        x, _, rank, _ = np.linalg.lstsq(a, dst[inliers], rcond=None)
        if rank < 3:
            break
        refit = np.eye(3)
        refit[0, :] = x[:, 0]
        refit[1, :] = x[:, 1]
        best_f = refit
        new_inliers = _transfer_sq_errors(best_f, src, dst) < tau2
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    return AffineTransform(best_f), inliers


def select_and_warp(
    probe: Image,
    candidates: Sequence[tuple[Image, RankedCandidate]],
    *,
    rfn_floor: float = 0.0,
) -> tuple[Image, AffineTransform, float]:
    """Warp the highest-RFN candidate into the probe frame.

    RFN ties within 1e-12 break by higher inlier count, then lower image id.
    Raises NoContextError when no candidate has rfn above the floor.
    """
    best: tuple[Image, RankedCandidate] | None = None
    for img, cand in candidates:
        if cand.rfn <= 0 or cand.rfn < rfn_floor:
            continue
        if best is None:
            best = (img, cand)
            continue
        cur = best[1]
        if cand.rfn > cur.rfn + 1e-12:
            best = (img, cand)
        elif abs(cand.rfn - cur.rfn) <= 1e-12:
            if (cand.inlier_count, -cand.image_id) > (cur.inlier_count, -cur.image_id):
                best = (img, cand)
    if best is None:
        raise NoContextError("no candidate registers with usable conditioning")
    img, cand = best
    warped = warp_affine(img, cand.transform.m, (probe.height, probe.width))
    return warped, cand.transform, cand.rfn
