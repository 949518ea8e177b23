"""End-to-end orchestration: search, rank, warp, compare, aggregate.

``run_probe`` executes the per-probe chain (descriptor query, per-candidate
MSAC registration, conditioning-ranked selection, comparators) and writes
heat maps; ``run_batch`` maps it over a dataset manifest, pools per-comparator
ROC curves, and writes machine-readable reports.  All randomness derives from
the configured seed via named sub-streams, so batch results are reproducible
for any worker count.
"""

from __future__ import annotations

import json
import multiprocessing
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import index as index_mod
from .comparators import COMPARATORS, ComparatorConfig, by_name
from .errors import (
    ComparatorError,
    ConfigError,
    DegenerateGeometryError,
    FeatureError,
    ParameterError,
    RegistrationInfeasibleError,
)
from .evaluation import RocCurve, perturb_hsv, perturb_poisson, perturb_rotate, roc_from_pool
from .features import detect_and_describe
from .imaging import Image, load_image, load_mask, read_heatmap, warp_affine, write_heatmap
from .registration import (
    AffineTransform,
    RankedCandidate,
    estimate_affine_msac,
    match_descriptors,
    rfn,
)
from .rng import substream
from .synth import SpliceRecord, read_manifest

__all__ = ["PipelineConfig", "ProbeReport", "run_probe", "run_batch", "BatchSummary"]

STATUS_OK = "ok"
STATUS_NO_CONTEXT = "no-context"
STATUS_DEGENERATE = "degenerate"

RESULT_PERTURBS = ("hsv", "poisson", "rotate")


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: Path
    index_path: Path | None = None
    n_retrieved: int = 100
    comparators: tuple[str, ...] = ("irpsnr", "prnu", "ssim", "hsvks", "patchmatch")
    comparator_cfg: ComparatorConfig = field(default_factory=ComparatorConfig)
    rfn_floor: float = 1e-3
    seed: int = 0
    checks: int = 256
    max_points: int = 500
    msac_tau: float = 3.0
    result_perturb: str | None = None  # hsv | poisson | rotate, applied to C
    workers: int = 1

    def __post_init__(self):
        if self.n_retrieved < 1:
            raise ConfigError(f"n_retrieved must be >= 1, got {self.n_retrieved}")
        if not 0.0 < self.rfn_floor < 1.0 / 3.0:
            raise ConfigError(f"rfn_floor must lie in (0, 1/3), got {self.rfn_floor}")
        for name in self.comparators:
            by_name(name)
        if self.result_perturb is not None and self.result_perturb not in RESULT_PERTURBS:
            raise ConfigError(f"unknown result perturbation {self.result_perturb!r}")
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.index_path is not None:
            object.__setattr__(self, "index_path", Path(self.index_path))


@dataclass
class ProbeReport:
    probe_id: str
    status: str
    candidate_id: int | None = None
    transform: list[float] | None = None  # 9 numbers, row-major
    rfn: float | None = None
    heatmaps: dict[str, str] = field(default_factory=dict)
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "probe_id": self.probe_id,
                "status": self.status,
                "candidate_id": self.candidate_id,
                "transform": self.transform,
                "rfn": self.rfn,
                "heatmaps": self.heatmaps,
                "message": self.message,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "ProbeReport":
        return cls(**json.loads(line))


def _register_candidates(
    forest: index_mod.ForestIndex,
    ranked: list[tuple[int, int]],
    probe_pts: np.ndarray,
    probe_vecs: np.ndarray,
    cfg: PipelineConfig,
    probe_id: str,
) -> list[RankedCandidate]:
    candidates = []
    for image_id, _votes in ranked:
        meta, vecs = forest.records_for_image(image_id)
        cand_pts = np.stack([meta["x"], meta["y"]], axis=1).astype(np.float64)
        try:
            matches = match_descriptors(vecs, probe_vecs)
            transform, inliers = estimate_affine_msac(
                matches,
                cand_pts,
                probe_pts,
                tau=cfg.msac_tau,
                rng=substream(cfg.seed, "msac", probe_id, int(image_id)),
            )
        except (RegistrationInfeasibleError, DegenerateGeometryError):
            continue
        value = rfn(transform)
        if value <= 0.0:
            continue
        candidates.append(RankedCandidate(int(image_id), transform, value, int(inliers.sum())))
    return candidates


def _select_candidate(candidates: list[RankedCandidate], floor: float) -> RankedCandidate | None:
    best = None
    for cand in candidates:
        if cand.rfn < floor:
            continue
        if best is None or cand.rfn > best.rfn + 1e-12:
            best = cand
        elif abs(cand.rfn - best.rfn) <= 1e-12 and (
            (cand.inlier_count, -cand.image_id) > (best.inlier_count, -best.image_id)
        ):
            best = cand
    return best


def _perturb_candidate(img: Image, kind: str, rng) -> Image:
    if kind == "hsv":
        return perturb_hsv(img, 0.2, rng)
    if kind == "poisson":
        return perturb_poisson(img, (50.0, 500.0), rng)
    raise ParameterError(f"not a pre-warp perturbation: {kind}")


def run_probe(
    probe: Image,
    forest: index_mod.ForestIndex,
    cfg: PipelineConfig,
    probe_id: str,
    gallery_root: Path | None = None,
) -> ProbeReport:
    """Search, register, select, compare; writes heat maps under out_dir.

    When no retrieved image registers with conditioning above ``rfn_floor``
    the report is ``no-context`` and no heat map is emitted.
    """
    report = ProbeReport(probe_id=probe_id, status=STATUS_NO_CONTEXT)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            descs = detect_and_describe(probe, cfg.max_points)
    except FeatureError as exc:
        return replace_status(report, STATUS_DEGENERATE, str(exc))
    if len(descs) < 3:
        return replace_status(report, STATUS_DEGENERATE, f"only {len(descs)} keypoints")

    probe_vecs = np.stack([d.vector for d in descs])
    probe_pts = np.array([[d.keypoint.x, d.keypoint.y] for d in descs])
    result = index_mod.query_images(forest, probe_vecs, cfg.n_retrieved, checks=cfg.checks)
    if not result.ranked:
        report.message = "no gallery image attracted votes"
        return report

    candidates = _register_candidates(forest, result.ranked, probe_pts, probe_vecs, cfg, probe_id)
    best = _select_candidate(candidates, cfg.rfn_floor)
    if best is None:
        report.message = "no candidate above the conditioning floor"
        return report

    path = Path(forest.image_path(best.image_id))
    if gallery_root is not None and not path.is_absolute():
        path = gallery_root / path
    candidate_img = load_image(path)
    if cfg.result_perturb in ("hsv", "poisson"):
        candidate_img = _perturb_candidate(
            candidate_img,
            cfg.result_perturb,
            substream(cfg.seed, "perturb", cfg.result_perturb, probe_id),
        )
    warped = warp_affine(candidate_img, best.transform.m, (probe.height, probe.width))
    if cfg.result_perturb == "rotate":
        rot_rng = substream(cfg.seed, "perturb", "rotate", probe_id)
        warped = perturb_rotate(warped, 15.0, rot_rng)

    heat_dir = cfg.out_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    report.status = STATUS_OK
    report.candidate_id = best.image_id
    report.transform = [float(v) for v in best.transform.m.ravel()]
    report.rfn = best.rfn
    for name in cfg.comparators:
        fn = COMPARATORS[name]
        try:
            if name == "patchmatch":
                hm = fn(probe, warped, cfg.comparator_cfg, substream(cfg.seed, "patchmatch", probe_id))
            else:
                hm = fn(probe, warped, cfg.comparator_cfg)
        except ComparatorError as exc:
            report.message = f"{name}: {exc}"
            report.status = STATUS_NO_CONTEXT
            report.candidate_id = None
            report.transform = None
            report.rfn = None
            report.heatmaps = {}
            return report
        out_path = heat_dir / f"{probe_id}_{name}.png"
        write_heatmap(hm, out_path)
        report.heatmaps[name] = str(out_path.relative_to(cfg.out_dir))
    return report


def replace_status(report: ProbeReport, status: str, message: str) -> ProbeReport:
    report.status = status
    report.message = message
    return report


@dataclass
class BatchSummary:
    reports: list[ProbeReport]
    curves: dict[str, RocCurve]
    n_ok: int
    n_total: int
    summary_csv: Path
    reports_path: Path


_WORKER_STATE: dict = {}


def _init_worker(forest, cfg, manifest_dir):
    _WORKER_STATE["forest"] = forest
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["manifest_dir"] = manifest_dir


def _probe_task(args: tuple[int, SpliceRecord]) -> tuple[int, ProbeReport]:
    i, record = args
    forest = _WORKER_STATE["forest"]
    cfg = _WORKER_STATE["cfg"]
    manifest_dir = _WORKER_STATE["manifest_dir"]
    probe_id = Path(record.probe_path).stem
    try:
        probe = load_image(manifest_dir / record.probe_path)
    except OSError as exc:
        report = ProbeReport(probe_id=probe_id, status=STATUS_DEGENERATE, message=str(exc))
        return i, report
    return i, run_probe(probe, forest, cfg, probe_id, gallery_root=manifest_dir)


def run_batch(
    manifest_path: str | Path,
    cfg: PipelineConfig,
    forest: index_mod.ForestIndex | None = None,
) -> BatchSummary:
    """Run every manifest probe, aggregate per-comparator ROC, write outputs.

    Probe failures are recorded in their reports, never fatal; the summary
    counts them.  Outputs: ``reports.jsonl``, ``summary.csv`` and one
    ``roc_<comparator>.csv`` per comparator with scored probes.
    """
    manifest_path = Path(manifest_path)
    manifest_dir = manifest_path.parent
    records = read_manifest(manifest_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    if forest is None:
        if cfg.index_path is None:
            raise ConfigError("run_batch needs a loaded index or cfg.index_path")
        forest = index_mod.load(cfg.index_path)

    results: list[ProbeReport | None] = [None] * len(records)
    if records:
        tasks = list(enumerate(records))
        if cfg.workers > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(
                cfg.workers, initializer=_init_worker, initargs=(forest, cfg, manifest_dir)
            ) as pool:
                for i, report in pool.imap_unordered(_probe_task, tasks):
                    results[i] = report
        else:
            _init_worker(forest, cfg, manifest_dir)
            for task in tasks:
                i, report = _probe_task(task)
                results[i] = report
    else:
        warnings.warn("empty manifest: nothing to do", stacklevel=2)

    reports = [r for r in results if r is not None]
    reports_path = cfg.out_dir / "reports.jsonl"
    reports_path.write_text("".join(r.to_json() + "\n" for r in reports))

    curves = aggregate_roc(reports, records, cfg.out_dir, manifest_dir)
    for name, curve in sorted(curves.items()):
        (cfg.out_dir / f"roc_{name}.csv").write_text("\n".join(curve.csv_lines()) + "\n")

    n_ok = sum(1 for r in reports if r.status == STATUS_OK)
    lines = ["comparator,probes_ok,probes_total,auc"]
    for name in sorted(cfg.comparators):
        auc = f"{curves[name].auc:.8f}" if name in curves else "nan"
        lines.append(f"{name},{n_ok},{len(records)},{auc}")
    summary_csv = cfg.out_dir / "summary.csv"
    summary_csv.write_text("\n".join(lines) + "\n")
    return BatchSummary(reports, curves, n_ok, len(records), summary_csv, reports_path)


def aggregate_roc(
    reports: list[ProbeReport],
    records: list[SpliceRecord],
    out_dir: Path,
    manifest_dir: Path,
) -> dict[str, RocCurve]:
    """Pool valid heat-map pixels against masks, micro-averaged per comparator."""
    by_probe = {Path(rec.probe_path).stem: rec for rec in records}
    pools: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for report in reports:
        if report.status != STATUS_OK:
            continue
        record = by_probe.get(report.probe_id)
        if record is None:
            continue
        mask = load_mask(manifest_dir / record.mask_path)
        for name, rel in report.heatmaps.items():
            hm = read_heatmap(out_dir / rel)
            sel = hm.valid_mask
            pools.setdefault(name, []).append(
                (hm.scores[sel].astype(np.float32), mask[sel])
            )
    curves = {}
    for name, chunks in pools.items():
        scores = np.concatenate([c[0] for c in chunks])
        labels = np.concatenate([c[1] for c in chunks])
        if labels.any() and not labels.all():
            curves[name] = roc_from_pool(scores, labels)
    return curves
