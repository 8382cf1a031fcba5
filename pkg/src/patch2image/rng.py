"""Deterministic random-stream plumbing.

All randomness in the package flows from one root seed through named
substreams, so adding a consumer never perturbs the draws of another and
every run is reproducible bit for bit from (seed, name) pairs alone.

numpy's SeedSequence-based generators take integer lists as keys; we hash
the substream name to a stable 32-bit value (crc32, not Python's salted
hash) and spawn ``default_rng([root_seed, name_hash, *indices])``.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "per_index"]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the root seed."""
    return np.random.default_rng([root_seed, _name_key(name)])


def per_index(root_seed: int, name: str, index: int) -> np.random.Generator:
    """Generator keyed additionally by a sample index.

    Used where per-item determinism must survive reordering or slicing of
    the dataset (augmentation, patch jitter): item i always sees the same
    draws no matter which batch it lands in.
    """
    return np.random.default_rng([root_seed, _name_key(name), index])
