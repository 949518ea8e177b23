"""Command-line surface.

Commands:
  synth                build a synthetic splice dataset + gallery
  index build          index a gallery listing into a KD-forest file
  index query          retrieve ranked gallery images for one probe
  compare              run one comparator on an aligned image pair
  run                  full pipeline over a dataset manifest
  eval roc             recompute ROC curves from written reports
  perturb              apply hsv / poisson / rotate to one image

A TOML config file (``--config``) can pre-set any ``run`` option; explicit
flags win over the file.  Every command takes ``--seed``.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import index as index_mod
from .comparators import COMPARATORS, ComparatorConfig, by_name
from .errors import TamperscopeError
from .evaluation import perturb_hsv, perturb_poisson, perturb_rotate
from .features import RECORD_DTYPE, detect_and_describe, pack_descriptors
from .imaging import load_image, save_image, write_heatmap
from .pipeline import PipelineConfig, aggregate_roc, run_batch
from .rng import substream
from .synth import read_gallery_listing, read_manifest, write_dataset

_ALL_COMPARATORS = ",".join(sorted(COMPARATORS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tamperscope")
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic splice dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--hosts", type=int, default=None, help="default: one per probe")
    p.add_argument("--distractors", type=int, default=100)
    p.add_argument("--host-size", type=int, default=192)
    p.add_argument("--distractor-size", type=int, default=112)

    p = sub.add_parser("index", help="build or query the descriptor index")
    isub = p.add_subparsers(dest="index_command", required=True)
    b = isub.add_parser("build")
    b.add_argument("gallery", type=Path, help="gallery.jsonl listing")
    b.add_argument("--out", required=True, type=Path)
    b.add_argument("--trees", type=int, default=8)
    b.add_argument("--leaf-size", type=int, default=16)
    b.add_argument("--max-points", type=int, default=500)
    q = isub.add_parser("query")
    q.add_argument("image", type=Path)
    q.add_argument("--index", required=True, type=Path)
    q.add_argument("--n", type=int, default=100)
    q.add_argument("--checks", type=int, default=256)

    p = sub.add_parser("compare", help="compare two aligned images")
    p.add_argument("probe", type=Path)
    p.add_argument("candidate", type=Path)
    p.add_argument("--method", required=True, choices=sorted(COMPARATORS))
    p.add_argument("--out", required=True, type=Path, help="heat map PNG path")

    p = sub.add_parser("run", help="full pipeline over a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--index", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--comparators", default=None, help=f"comma list of {_ALL_COMPARATORS}")
    p.add_argument("--n", type=int, default=None, help="retrieved images per probe")
    p.add_argument("--rfn-floor", type=float, default=None)
    p.add_argument("--checks", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--perturb", choices=("hsv", "poisson", "rotate"), default=None)

    p = sub.add_parser("eval", help="evaluation utilities")
    esub = p.add_subparsers(dest="eval_command", required=True)
    r = esub.add_parser("roc")
    r.add_argument("reports", type=Path, help="reports.jsonl from a run")
    r.add_argument("--manifest", required=True, type=Path)
    r.add_argument("--out-dir", type=Path, default=None, help="default: reports directory")

    p = sub.add_parser("perturb", help="perturb a single image")
    p.add_argument("kind", choices=("hsv", "poisson", "rotate"))
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--delta", type=float, default=0.2, help="hsv: max channel fluctuation")
    p.add_argument("--peak-min", type=float, default=50.0)
    p.add_argument("--peak-max", type=float, default=500.0)
    p.add_argument("--max-deg", type=float, default=15.0)
    return parser


def _cmd_synth(args) -> int:
    manifest, gallery = write_dataset(
        args.out,
        args.seed,
        n_probes=args.probes,
        n_distractors=args.distractors,
        host_size=args.host_size,
        distractor_size=args.distractor_size,
        n_hosts=args.hosts,
    )
    print(f"wrote {manifest} and {gallery}")
    return 0


def _cmd_index_build(args) -> int:
    listing = read_gallery_listing(args.gallery)
    root = args.gallery.parent
    chunks = []
    paths = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for image_id in sorted(listing):
            rel = listing[image_id]
            img = load_image(root / rel)
            descs = detect_and_describe(img, args.max_points, image_id=image_id)
            if descs:
                chunks.append(pack_descriptors(descs))
            paths[image_id] = rel
    records = np.concatenate(chunks) if chunks else np.zeros(0, dtype=RECORD_DTYPE)
    forest = index_mod.build(
        records, trees=args.trees, leaf_size=args.leaf_size, seed=args.seed, image_paths=paths
    )
    index_mod.save(forest, args.out)
    print(f"indexed {forest.record_count} descriptors from {len(listing)} images -> {args.out}")
    return 0


def _cmd_index_query(args) -> int:
    forest = index_mod.load(args.index)
    img = load_image(args.image)
    descs = detect_and_describe(img)
    result = index_mod.query_images(forest, descs, args.n, checks=args.checks)
    for image_id, votes in result.ranked:
        print(f"{image_id}\t{votes}\t{forest.image_path(image_id)}")
    return 0


def _cmd_compare(args) -> int:
    probe = load_image(args.probe)
    candidate = load_image(args.candidate)
    fn = by_name(args.method)
    if args.method == "patchmatch":
        hm = fn(probe, candidate, ComparatorConfig(), substream(args.seed, "patchmatch", "cli"))
    else:
        hm = fn(probe, candidate, ComparatorConfig())
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_heatmap(hm, args.out)
    print(f"wrote {args.out} (+ .thm sidecar)")
    return 0


def _load_toml(path: Path | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _cmd_run(args) -> int:
    conf = _load_toml(args.config)
    pipe = conf.get("pipeline", {})
    comp = conf.get("comparators", {})

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return pipe.get(key, default)

    out_dir = pick(args.out, "out_dir", None)
    index_path = pick(args.index, "index", None)
    if out_dir is None or index_path is None:
        print("run: --out and --index are required (flag or config file)", file=sys.stderr)
        return 2
    names = pick(args.comparators, "comparators", _ALL_COMPARATORS)
    if isinstance(names, str):
        names = tuple(n.strip() for n in names.split(",") if n.strip())
    cfg = PipelineConfig(
        out_dir=Path(out_dir),
        index_path=Path(index_path),
        n_retrieved=int(pick(args.n, "n_retrieved", 100)),
        comparators=tuple(names),
        comparator_cfg=ComparatorConfig(**comp),
        rfn_floor=float(pick(args.rfn_floor, "rfn_floor", 1e-3)),
        seed=args.seed,
        checks=int(pick(args.checks, "checks", 256)),
        workers=int(pick(args.workers, "workers", 1)),
        result_perturb=pick(args.perturb, "result_perturb", None),
    )
    summary = run_batch(args.manifest, cfg)
    print(f"{summary.n_ok}/{summary.n_total} probes ok; summary at {summary.summary_csv}")
    if summary.n_total > 0 and summary.n_ok == 0:
        return 1
    return 0


def _cmd_eval_roc(args) -> int:
    from .pipeline import ProbeReport

    reports = [
        ProbeReport.from_json(line)
        for line in args.reports.read_text().splitlines()
        if line.strip()
    ]
    records = read_manifest(args.manifest)
    out_dir = args.out_dir or args.reports.parent
    curves = aggregate_roc(reports, records, args.reports.parent, args.manifest.parent)
    for name, curve in sorted(curves.items()):
        path = Path(out_dir) / f"roc_{name}.csv"
        path.write_text("\n".join(curve.csv_lines()) + "\n")
        print(f"{name}: auc={curve.auc:.4f} -> {path}")
    if not curves:
        print("no scored probes found", file=sys.stderr)
        return 1
    return 0


def _cmd_perturb(args) -> int:
    img = load_image(args.input)
    rng = substream(args.seed, "perturb-cli", args.kind)
    if args.kind == "hsv":
        out = perturb_hsv(img, args.delta, rng)
    elif args.kind == "poisson":
        out = perturb_poisson(img, (args.peak_min, args.peak_max), rng)
    else:
        out = perturb_rotate(img, args.max_deg, rng)
    save_image(out, args.output)
    print(f"wrote {args.output}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "index":
            if args.index_command == "build":
                return _cmd_index_build(args)
            return _cmd_index_query(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "eval":
            return _cmd_eval_roc(args)
        if args.command == "perturb":
            return _cmd_perturb(args)
    except TamperscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
