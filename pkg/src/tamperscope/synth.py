"""Desk-scale synthetic splice dataset generator.

Stands in for a real spliced-image corpus plus web-scale distractors: random
textured host/donor images, polygonal donor regions alpha-blended onto hosts
with a 1-px feather, exact binary masks, and the unmodified host registered
in the gallery as the probe's true near-duplicate.  Everything derives from
one seed and is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw

from .errors import EvaluationError, ParameterError
from .imaging import Colorspace, Image, save_image, save_mask, warp_affine
from .rng import substream

__all__ = [
    "SpliceRecord",
    "generate_texture",
    "generate_corpus",
    "synthesize_splices",
    "write_dataset",
    "read_manifest",
    "read_gallery_listing",
]

MIN_AREA_FRAC = 0.01
MAX_AREA_FRAC = 0.50
_MAX_ATTEMPTS = 100


@dataclass
class SpliceRecord:
    probe_path: str
    host_id: int
    donor_id: int
    mask_path: str
    perturbation: dict | None
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SpliceRecord":
        return cls(**json.loads(line))


def _polygon_mask(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    canvas = PILImage.new("L", (shape[1], shape[0]), 0)
    ImageDraw.Draw(canvas).polygon([(float(x), float(y)) for x, y in vertices], fill=255)
    return np.asarray(canvas) >= 128


def _star_polygon(rng: np.random.Generator, center, r_lo, r_hi, n_vertices) -> np.ndarray:
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n_vertices))
    radii = rng.uniform(r_lo, r_hi, n_vertices)
    xs = center[0] + radii * np.cos(angles)
    ys = center[1] + radii * np.sin(angles)
    return np.stack([xs, ys], axis=1)


def generate_texture(rng: np.random.Generator, size: int) -> Image:
    """A random textured RGB image: smooth color field, hard shapes, mild noise."""
    cells = int(rng.integers(3, 7))
    coarse = rng.uniform(0.15, 0.85, (cells, cells, 3))
    yy = np.linspace(0, cells - 1, size)
    xx = np.linspace(0, cells - 1, size)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1)
    x1 = np.minimum(x0 + 1, cells - 1)
    fy = (yy - y0)[:, None, None]
    fx = (xx - x0)[None, :, None]
    img = (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
        + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y1, x1)] * fy * fx
    )

    n_shapes = int(rng.integers(6, 14))
    for _ in range(n_shapes):
        center = rng.uniform(size * 0.1, size * 0.9, 2)
        r_hi = rng.uniform(size * 0.05, size * 0.22)
        r_lo = r_hi * rng.uniform(0.35, 0.9)
        n_vert = int(rng.integers(3, 9))
        verts = _star_polygon(rng, center, r_lo, r_hi, n_vert)
        mask = _polygon_mask(verts, (size, size))
        color = rng.uniform(0.05, 0.95, 3)
        img = np.where(mask[..., None], color, img)

    img = img + rng.normal(0.0, 0.008, img.shape)
    return Image(np.clip(img, 0.0, 1.0), Colorspace.RGB)


def generate_corpus(seed: int, count: int, size: int, label: str) -> list[Image]:
    return [generate_texture(substream(seed, "corpus", label, i), size) for i in range(count)]


def _feather(mask: np.ndarray) -> np.ndarray:
    """1-px feather: 3x3 box average of the binary mask."""
    m = mask.astype(np.float64)
    padded = np.pad(m, 1, mode="edge")
    acc = np.zeros_like(m)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            acc += padded[dy : dy + m.shape[0], dx : dx + m.shape[1]]
    return acc / 9.0


def make_splice(
    host: Image, donor: Image, rng: np.random.Generator
) -> tuple[Image, np.ndarray]:
    """Cut a random polygonal donor region, transform it, blend onto the host.

    Returns (probe, binary mask).  The pasted region is rescaled by
    [0.7, 1.3], rotated by up to 20 degrees, and placed so it stays inside
    the host; final area must land in [1%, 50%] of the frame or the draw is
    retried (up to 100 attempts).
    """
    h, w = host.height, host.width
    for _ in range(_MAX_ATTEMPTS):
        n_vert = int(rng.integers(5, 13))
        target_frac = rng.uniform(0.02, 0.25)
        # a star polygon with mean radius r has area near pi * r^2 * 0.8
        r_mean = np.sqrt(target_frac * h * w / np.pi)
        r_hi = r_mean * 1.25
        r_lo = r_mean * 0.75
        margin = r_hi + 2
        if 2 * margin >= min(donor.height, donor.width):
            continue
        center = np.array(
            [
                rng.uniform(margin, donor.width - margin),
                rng.uniform(margin, donor.height - margin),
            ]
        )
        verts = _star_polygon(rng, center, r_lo, r_hi, n_vert)
        region = _polygon_mask(verts, (donor.height, donor.width))
        if not region.any():
            continue

        scale = rng.uniform(0.7, 1.3)
        angle = np.deg2rad(rng.uniform(-20.0, 20.0))
        paste = np.array([rng.uniform(0, w), rng.uniform(0, h)])
        cos, sin = np.cos(angle) * scale, np.sin(angle) * scale
        m = np.array(
            [
                [cos, -sin, paste[0] - cos * center[0] + sin * center[1]],
                [sin, cos, paste[1] - sin * center[0] - cos * center[1]],
                [0.0, 0.0, 1.0],
            ]
        )
        warped_donor = warp_affine(donor, m, (h, w))
        warped_region = warp_affine(
            Image(region.astype(np.float64), Colorspace.GRAY), m, (h, w)
        )
        mask = warped_region.data >= 0.5
        # reject regions touching the frame border (partially cut pastes)
        if mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any():
            continue
        area = mask.mean()
        if not MIN_AREA_FRAC <= area <= MAX_AREA_FRAC:
            continue

        alpha = _feather(mask)
        # never blend in pixels the donor warp left undefined
        alpha = np.where(warped_donor.valid_mask, alpha, 0.0)
        probe = host.data * (1.0 - alpha[..., None]) + warped_donor.data * alpha[..., None]
        return Image(np.clip(probe, 0.0, 1.0), Colorspace.RGB), mask
    raise EvaluationError(f"no usable splice region found in {_MAX_ATTEMPTS} attempts")


def synthesize_splices(
    hosts: list[Image],
    donors: list[Image],
    count: int,
    seed: int,
) -> list[tuple[Image, np.ndarray, int, int]]:
    """(probe, mask, host_id, donor_id) tuples; host i%len(hosts) hosts probe i."""
    if not hosts or not donors:
        raise ParameterError("host and donor corpora must be non-empty")
    out = []
    for i in range(count):
        rng = substream(seed, "splice", i)
        host_id = i % len(hosts)
        donor_id = int(rng.integers(0, len(donors)))
        probe, mask = make_splice(hosts[host_id], donors[donor_id], rng)
        out.append((probe, mask, host_id, donor_id))
    return out


def write_dataset(
    out_dir: str | Path,
    seed: int,
    n_probes: int,
    n_distractors: int,
    host_size: int = 192,
    distractor_size: int = 112,
    n_hosts: int | None = None,
) -> tuple[Path, Path]:
    """Generate and write a full dataset; returns (manifest, gallery listing).

    Layout: probes/, masks/, gallery/ image files; ``manifest.jsonl`` with one
    SpliceRecord per line and ``gallery.jsonl`` with one
    ``{"image_id", "path"}`` line per gallery image.  Hosts take gallery ids
    0..n_hosts-1, distractors follow.
    """
    out_dir = Path(out_dir)
    for sub in ("probes", "masks", "gallery"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    n_hosts = n_hosts if n_hosts is not None else n_probes
    hosts = generate_corpus(seed, n_hosts, host_size, "hosts")
    donors = generate_corpus(seed, max(n_probes // 2, 1), host_size, "donors")

    gallery_lines = []
    for i, host in enumerate(hosts):
        rel = f"gallery/h{i:06d}.png"
        save_image(host, out_dir / rel)
        gallery_lines.append(json.dumps({"image_id": i, "path": rel}, sort_keys=True))
    for j in range(n_distractors):
        img = generate_texture(substream(seed, "corpus", "distractors", j), distractor_size)
        rel = f"gallery/d{j:06d}.png"
        save_image(img, out_dir / rel)
        gallery_lines.append(
            json.dumps({"image_id": n_hosts + j, "path": rel}, sort_keys=True)
        )

    records = []
    for probe, mask, host_id, donor_id in synthesize_splices(hosts, donors, n_probes, seed):
        i = len(records)
        probe_rel = f"probes/p{i:06d}.png"
        mask_rel = f"masks/p{i:06d}.png"
        save_image(probe, out_dir / probe_rel)
        save_mask(mask, out_dir / mask_rel)
        records.append(SpliceRecord(probe_rel, host_id, donor_id, mask_rel, None, seed))

    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(r.to_json() + "\n" for r in records))
    gallery = out_dir / "gallery.jsonl"
    gallery.write_text("".join(line + "\n" for line in gallery_lines))
    return manifest, gallery


def read_manifest(path: str | Path) -> list[SpliceRecord]:
    lines = Path(path).read_text().splitlines()
    return [SpliceRecord.from_json(line) for line in lines if line.strip()]


def read_gallery_listing(path: str | Path) -> dict[int, str]:
    table = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            table[int(entry["image_id"])] = entry["path"]
    return table
