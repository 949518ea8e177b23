"""Randomized KD-tree forest over 64-d descriptors with image-level voting.

Trees split at the median of a dimension drawn uniformly from the five
highest-variance dimensions of the node's subset.  Queries run best-bin-first
with one shared priority queue across all trees; a record's distance is
computed at most once per query, and the traversal stops once ``checks``
distinct records have been evaluated.  The index is immutable after build.
"""

from __future__ import annotations

import heapq
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IndexBuildError, IndexFormatError, ParameterError, QueryError
from .features import Descriptor, RECORD_DTYPE, pack_descriptors
from .rng import substream

__all__ = ["ForestIndex", "QueryResult", "build", "knn", "query_images", "save", "load"]

_MAGIC = b"KDF1"
_VERSION = 1

META_DTYPE = np.dtype(
    [
        ("image_id", "<u8"),
        ("x", "<f4"),
        ("y", "<f4"),
        ("scale", "<f4"),
        ("orientation", "<f4"),
        ("response", "<f4"),
    ]
)


@dataclass
class _Tree:
    split_dim: np.ndarray  # (nodes,) int16, -1 marks a leaf
    split_val: np.ndarray  # (nodes,) float32
    left: np.ndarray  # (nodes,) int32
    right: np.ndarray  # (nodes,) int32
    start: np.ndarray  # (nodes,) int32, leaf range into perm
    end: np.ndarray  # (nodes,) int32
    perm: np.ndarray  # (records,) int32


@dataclass
class ImageEntry:
    path: str
    start: int
    end: int

    @property
    def descriptor_count(self) -> int:
        return self.end - self.start


@dataclass
class QueryResult:
    """Gallery images ranked by vote count, at most ``n_requested`` entries."""

    ranked: list[tuple[int, int]]  # (image_id, votes), descending votes
    n_requested: int


@dataclass
class ForestIndex:
    meta: np.ndarray  # (records,) META_DTYPE
    vectors: np.ndarray  # (records, 64) float32, contiguous
    trees: list[_Tree]
    image_table: dict[int, ImageEntry]
    leaf_size: int
    _scratch: threading.local = field(default_factory=threading.local, repr=False)

    @property
    def record_count(self) -> int:
        return self.meta.shape[0]

    def image_path(self, image_id: int) -> str:
        return self.image_table[image_id].path

    def records_for_image(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(meta rows, vectors) of one gallery image's descriptors."""
        entry = self.image_table[image_id]
        return self.meta[entry.start : entry.end], self.vectors[entry.start : entry.end]

    def _visit_state(self) -> tuple[np.ndarray, list[int]]:
        st = self._scratch
        if not hasattr(st, "stamp"):
            st.stamp = np.zeros(self.record_count, dtype=np.int64)
            st.counter = [0]
        return st.stamp, st.counter


def _build_tree(vectors: np.ndarray, rng: np.random.Generator, leaf_size: int) -> _Tree:
    n = vectors.shape[0]
    perm = np.arange(n, dtype=np.int32)
    split_dim: list[int] = []
    split_val: list[float] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    end: list[int] = []

    # Explicit stack; nodes are numbered in creation order with the root at 0.
    # Each frame is (lo, hi, parent, side).
    stack = [(0, n, -1, 0)]
    while stack:
        lo, hi, parent, side = stack.pop()
        node = len(split_dim)
        if parent >= 0:
            (left if side == 0 else right)[parent] = node
        split_dim.append(-1)
        split_val.append(0.0)
        left.append(-1)
        right.append(-1)
        start.append(lo)
        end.append(hi)
        if hi - lo <= leaf_size:
            continue
        idx = perm[lo:hi]
        sub = vectors[idx]
        var = sub.var(axis=0)
        top5 = np.sort(np.argpartition(var, -5)[-5:])
        dim = int(top5[rng.integers(0, top5.shape[0])])
        half = (hi - lo) // 2
        order = np.argpartition(sub[:, dim], half)
        perm[lo:hi] = idx[order]
        split_dim[node] = dim
        split_val[node] = float(vectors[perm[lo + half], dim])
        # push right first so the left child is created (and numbered) first
        stack.append((lo + half, hi, node, 1))
        stack.append((lo, lo + half, node, 0))
    return _Tree(
        np.asarray(split_dim, dtype=np.int16),
        np.asarray(split_val, dtype=np.float32),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(start, dtype=np.int32),
        np.asarray(end, dtype=np.int32),
        perm,
    )


def build(
    descriptors,
    trees: int = 8,
    *,
    leaf_size: int = 16,
    seed: int = 0,
    image_paths: dict[int, str] | None = None,
) -> ForestIndex:
    """Build a forest over a stream of descriptors (or a packed record array).

    Records of one image must arrive contiguously; every tree indexes the
    identical record set via independent seeded RNG streams.
    """
    if isinstance(descriptors, np.ndarray) and descriptors.dtype == RECORD_DTYPE:
        records = descriptors
    else:
        records = pack_descriptors(list(descriptors))
    if records.shape[0] == 0:
        raise IndexBuildError("cannot build an index from an empty descriptor stream")
    if trees < 1:
        raise ParameterError(f"need at least one tree, got {trees}")
    if leaf_size < 1:
        raise ParameterError(f"leaf size must be >= 1, got {leaf_size}")

    meta = np.zeros(records.shape[0], dtype=META_DTYPE)
    for name in META_DTYPE.names:
        meta[name] = records[name]
    vectors = np.ascontiguousarray(records["vector"], dtype=np.float32)

    image_table: dict[int, ImageEntry] = {}
    ids = meta["image_id"]
    boundaries = np.flatnonzero(np.diff(ids)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [ids.shape[0]]])
    for s, e in zip(starts, ends):
        img_id = int(ids[s])
        if img_id in image_table:
            raise IndexBuildError(f"descriptors of image {img_id} are not contiguous")
        path = image_paths.get(img_id, "") if image_paths else ""
        image_table[img_id] = ImageEntry(path, int(s), int(e))

    built = [
        _build_tree(vectors, substream(seed, "forest-tree", t), leaf_size)
        for t in range(trees)
    ]
    return ForestIndex(meta, vectors, built, image_table, leaf_size)


def knn(
    index: ForestIndex,
    query: np.ndarray,
    k: int,
    checks: int = 256,
) -> list[tuple[int, float]]:
    """k nearest records by L2, ascending; at most ``checks`` distinct records scored."""
    if k <= 0:
        raise ParameterError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float32).reshape(64)
    stamp, counter = index._visit_state()
    counter[0] += 1
    qid = counter[0]

    heap: list[tuple[float, int, int]] = [(0.0, t, 0) for t in range(len(index.trees))]
    cand_idx: list[np.ndarray] = []
    cand_d2: list[np.ndarray] = []
    evaluated = 0
    while heap and evaluated < checks:
        _, t, node = heapq.heappop(heap)
        tree = index.trees[t]
        sd = tree.split_dim
        while sd[node] >= 0:
            dim = sd[node]
            diff = float(q[dim]) - float(tree.split_val[node])
            if diff < 0.0:
                near, far = tree.left[node], tree.right[node]
            else:
                near, far = tree.right[node], tree.left[node]
            heapq.heappush(heap, (abs(diff), t, int(far)))
            node = int(near)
        idx = tree.perm[tree.start[node] : tree.end[node]]
        fresh = idx[stamp[idx] != qid]
        if fresh.size == 0:
            continue
        stamp[fresh] = qid
        diffs = index.vectors[fresh] - q
        d2 = np.einsum("ij,ij->i", diffs, diffs)
        cand_idx.append(fresh)
        cand_d2.append(d2)
        evaluated += fresh.size

    if not cand_idx:
        return []
    all_idx = np.concatenate(cand_idx)
    all_d2 = np.concatenate(cand_d2).astype(np.float64)
    order = np.lexsort((all_idx, all_d2))[:k]
    return [(int(all_idx[i]), float(np.sqrt(all_d2[i]))) for i in order]


def query_images(
    index: ForestIndex,
    probe_descs: list[Descriptor] | np.ndarray,
    n_results: int = 100,
    *,
    checks: int = 256,
    ratio: float = 0.8,
) -> QueryResult:
    """Vote-ranked gallery images for a probe's descriptor set.

    Each probe descriptor casts one vote for the image of its nearest record
    when the Lowe ratio against the nearest record of any *other* image
    passes.  Ties rank by smaller summed match distance, then image id.
    """
    if isinstance(probe_descs, np.ndarray):
        qvecs = np.asarray(probe_descs, dtype=np.float32).reshape(-1, 64)
    else:
        qvecs = np.asarray([d.vector for d in probe_descs], dtype=np.float32).reshape(-1, 64)
    if qvecs.shape[0] == 0:
        raise QueryError("probe descriptor list is empty")
    if n_results < 1:
        raise ParameterError(f"n_results must be >= 1, got {n_results}")

    votes: dict[int, int] = {}
    dist_sums: dict[int, float] = {}
    ids = index.meta["image_id"]
    for q in qvecs:
        found = knn(index, q, k=8, checks=checks)
        if len(found) < 2:
            continue
        best_rec, best_dist = found[0]
        best_img = int(ids[best_rec])
        second_dist = None
        for rec, dist in found[1:]:
            if int(ids[rec]) != best_img:
                second_dist = dist
                break
        if second_dist is None:
            # all k hits came from one image; widen once before giving up
            for rec, dist in knn(index, q, k=64, checks=checks):
                if int(ids[rec]) != best_img:
                    second_dist = dist
                    break
        if second_dist is None:
            continue
        if second_dist <= 0.0 or best_dist >= ratio * second_dist:
            continue
        votes[best_img] = votes.get(best_img, 0) + 1
        dist_sums[best_img] = dist_sums.get(best_img, 0.0) + best_dist

    ranked = sorted(votes.items(), key=lambda kv: (-kv[1], dist_sums[kv[0]], kv[0]))
    return QueryResult(ranked[:n_results], n_results)


# ---------------------------------------------------------------------------
# Serialization

_HEADER = struct.Struct("<4sHHHHQQ")  # magic, version, T, leaf, pad, records, images
_CHUNK = 1 << 16


def save(index: ForestIndex, path: str | Path) -> None:
    path = Path(path)
    n = index.record_count
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(_MAGIC, _VERSION, len(index.trees), index.leaf_size, 0, n, len(index.image_table))
        )
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            block = np.zeros(hi - lo, dtype=RECORD_DTYPE)
            for name in META_DTYPE.names:
                block[name] = index.meta[name][lo:hi]
            block["vector"] = index.vectors[lo:hi]
            fh.write(block.tobytes())
        for img_id in sorted(index.image_table):
            entry = index.image_table[img_id]
            raw = entry.path.encode("utf-8")
            fh.write(struct.pack("<QIIH", img_id, entry.start, entry.end, len(raw)))
            fh.write(raw)
        for tree in index.trees:
            fh.write(struct.pack("<Q", tree.split_dim.shape[0]))
            fh.write(tree.split_dim.astype("<i2").tobytes())
            fh.write(tree.split_val.astype("<f4").tobytes())
            fh.write(tree.left.astype("<i4").tobytes())
            fh.write(tree.right.astype("<i4").tobytes())
            fh.write(tree.start.astype("<i4").tobytes())
            fh.write(tree.end.astype("<i4").tobytes())
            fh.write(tree.perm.astype("<i4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.raw):
            raise IndexFormatError(
                f"truncated index file {self.path}: wanted {nbytes} bytes at offset {self.pos}, "
                f"file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def load(path: str | Path) -> ForestIndex:
    path = Path(path)
    rd = _Reader(path.read_bytes(), path)
    magic, version, n_trees, leaf_size, _, n_records, n_images = _HEADER.unpack(
        rd.take(_HEADER.size)
    )
    if magic != _MAGIC:
        raise IndexFormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise IndexFormatError(f"{path}: index version {version}, expected {_VERSION}")

    meta = np.zeros(n_records, dtype=META_DTYPE)
    vectors = np.zeros((n_records, 64), dtype=np.float32)
    for lo in range(0, n_records, _CHUNK):
        hi = min(lo + _CHUNK, n_records)
        block = rd.array(RECORD_DTYPE, hi - lo)
        for name in META_DTYPE.names:
            meta[name][lo:hi] = block[name]
        vectors[lo:hi] = block["vector"]

    image_table: dict[int, ImageEntry] = {}
    for _ in range(n_images):
        img_id, start, end, path_len = struct.unpack("<QIIH", rd.take(18))
        raw_path = rd.take(path_len).decode("utf-8")
        image_table[int(img_id)] = ImageEntry(raw_path, int(start), int(end))

    trees = []
    for _ in range(n_trees):
        (node_count,) = struct.unpack("<Q", rd.take(8))
        trees.append(
            _Tree(
                rd.array("<i2", node_count),
                rd.array("<f4", node_count),
                rd.array("<i4", node_count),
                rd.array("<i4", node_count),
                rd.array("<i4", node_count),
                rd.array("<i4", node_count),
                rd.array("<i4", n_records),
            )
        )
    if rd.pos != len(rd.raw):
        raise IndexFormatError(f"{path}: {len(rd.raw) - rd.pos} trailing bytes after index data")
    return ForestIndex(meta, vectors, trees, image_table, leaf_size)
