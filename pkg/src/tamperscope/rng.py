"""Deterministic named random streams.

Every random component (forest build, MSAC, PatchMatch, perturbations,
dataset synthesis) pulls its generator from one global seed plus a name,
so a batch run is reproducible and any single component can be re-run in
isolation with the exact same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    # Four little-endian u32 words; stable across platforms and processes.
    return tuple(int.from_bytes(digest[4 * i : 4 * i + 4], "little") for i in range(4))


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Return a Generator for the sub-stream identified by ``names``.

    Same (seed, names) always yields the same stream; distinct names yield
    statistically independent streams.
    """
    key: tuple[int, ...] = ()
    for name in names:
        if isinstance(name, int):
            key += (name & 0xFFFFFFFF, (name >> 32) & 0xFFFFFFFF)
        else:
            key += _name_key(name)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
