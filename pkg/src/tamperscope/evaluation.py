"""Experimental protocol: ROC against ground-truth masks, recall@rank, and
the three perturbation families (color, noise, mis-registration).

ROC pooling is micro-averaged: all valid (score, label) pixels across probes
share one pool.  Thresholds sit at 256 uniformly-spaced quantile levels of
the pooled score distribution, so the curve depends on the rank order of
scores only and is invariant under any strictly monotone rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import EvaluationError, ParameterError
from .imaging import Colorspace, HeatMap, Image, hsv_to_rgb, rgb_to_hsv, rotate_about_center
from .index import QueryResult

__all__ = [
    "RocCurve",
    "roc",
    "roc_from_pool",
    "RecallAtRank",
    "recall_at_rank",
    "perturb_hsv",
    "perturb_poisson",
    "perturb_rotate",
]

N_THRESHOLDS = 256


@dataclass
class RocCurve:
    thresholds: np.ndarray  # quantile levels in [0, 1], descending score order
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def csv_lines(self) -> list[str]:
        lines = ["threshold,fpr,tpr"]
        for t, f, s in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{t:.8f},{f:.8f},{s:.8f}")
        lines.append(f"auc,{self.auc:.8f}")
        return lines


def roc_from_pool(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """ROC over one pooled (score, label) set; label 1 = tampered."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise EvaluationError("score/label pools differ in size")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            f"ROC needs both classes in the pool (pos={n_pos}, neg={n_neg})"
        )

    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    all_sorted = np.sort(scores)

    levels = np.linspace(0.0, 1.0, N_THRESHOLDS)
    cut_idx = np.floor(levels * (scores.size - 1)).astype(np.int64)
    cuts = all_sorted[cut_idx]

    # predict tampered where score >= cut
    tpr = 1.0 - np.searchsorted(pos, cuts, side="left") / n_pos
    fpr = 1.0 - np.searchsorted(neg, cuts, side="left") / n_neg

    order = np.argsort(cuts, kind="stable")[::-1]  # descending threshold
    fpr = np.concatenate([[0.0], fpr[order], [1.0]])
    tpr = np.concatenate([[0.0], tpr[order], [1.0]])
    levels_out = np.concatenate([[1.0], levels[order], [0.0]])

    srt = np.lexsort((tpr, fpr))
    fpr, tpr, levels_out = fpr[srt], tpr[srt], levels_out[srt]
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(levels_out, fpr, tpr, auc)


def roc(heatmaps: Sequence[HeatMap], masks: Sequence[np.ndarray]) -> RocCurve:
    """Micro-averaged ROC of heat maps against binary masks (1 = tampered).

    Only valid heat-map pixels are scored; invalid pixels are excluded rather
    than counted as negatives.
    """
    if len(heatmaps) != len(masks):
        raise EvaluationError("need one mask per heat map")
    if not heatmaps:
        raise EvaluationError("empty heat map list")
    scores = []
    labels = []
    for hm, mask in zip(heatmaps, masks):
        m = np.asarray(mask, dtype=bool)
        if m.shape != hm.scores.shape:
            raise EvaluationError(
                f"mask shape {m.shape} does not match heat map {hm.scores.shape}"
            )
        sel = hm.valid_mask
        scores.append(hm.scores[sel].astype(np.float32))
        labels.append(m[sel])
    return roc_from_pool(np.concatenate(scores), np.concatenate(labels))


class RecallAtRank(NamedTuple):
    value: float
    skipped: int


def recall_at_rank(
    results: Sequence[QueryResult],
    truths: Sequence[Iterable[int]],
    rank: int,
) -> RecallAtRank:
    """Fraction of probes whose true relative appears within the top ``rank``.

    Probes with an empty truth set are skipped and tallied separately.
    """
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    if len(results) != len(truths):
        raise EvaluationError("need one truth set per query result")
    hits = 0
    scored = 0
    skipped = 0
    for res, truth in zip(results, truths):
        truth = set(truth)
        if not truth:
            skipped += 1
            continue
        scored += 1
        top = [img for img, _ in res.ranked[:rank]]
        if truth.intersection(top):
            hits += 1
    if scored == 0:
        raise EvaluationError("every probe had an empty truth set")
    return RecallAtRank(hits / scored, skipped)


# ---------------------------------------------------------------------------
# Perturbations (Experiment 2 analogues)


def _as_generator(rng: int | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def perturb_hsv(img: Image, delta: float = 0.2, rng: int | np.random.Generator = 0) -> Image:
    """Scale each HSV channel by an independent random factor.

    Per channel: u ~ Uniform(0, delta), then factor ~ Uniform(1-u, 1+u).
    Hue wraps modulo 1; saturation and value clamp to [0, 1].
    """
    if not 0.0 <= delta < 1.0:
        raise ParameterError(f"delta must lie in [0, 1), got {delta}")
    gen = _as_generator(rng)
    u = gen.uniform(0.0, delta, size=3)
    factors = gen.uniform(1.0 - u, 1.0 + u)
    if np.all(factors == 1.0):
        return img
    hsv = rgb_to_hsv(img) if img.colorspace is Colorspace.RGB else img
    data = hsv.data.copy()
    data[..., 0] = (data[..., 0] * factors[0]) % 1.0
    data[..., 1] = np.clip(data[..., 1] * factors[1], 0.0, 1.0)
    data[..., 2] = np.clip(data[..., 2] * factors[2], 0.0, 1.0)
    out = hsv_to_rgb(Image(data, Colorspace.HSV, hsv.valid_mask))
    return out if img.colorspace is Colorspace.RGB else rgb_to_hsv(out)


def perturb_poisson(
    img: Image,
    peak_range: tuple[float, float] = (50.0, 500.0),
    rng: int | np.random.Generator = 0,
) -> Image:
    """Shot noise: each sample becomes Poisson(value * peak) / peak.

    ``peak`` is drawn uniformly from ``peak_range``; larger peaks mean less
    relative noise.  Black stays exactly black.
    """
    lo, hi = peak_range
    if lo <= 0 or hi <= 0 or hi < lo:
        raise ParameterError(f"peak_range must be positive and ordered, got {peak_range}")
    gen = _as_generator(rng)
    peak = gen.uniform(lo, hi)
    noisy = gen.poisson(img.data * peak) / peak
    return Image(np.clip(noisy, 0.0, 1.0), img.colorspace, img.valid_mask)


def perturb_rotate(
    img: Image, max_deg: float = 15.0, rng: int | np.random.Generator = 0
) -> Image:
    """Rotate about the center by a uniform random angle in [-max_deg, max_deg].

    Use ``imaging.rotate_about_center`` directly to force a specific angle.
    """
    gen = _as_generator(rng)
    angle = gen.uniform(-max_deg, max_deg)
    return rotate_about_center(img, angle)
