"""Seedable, splittable random streams.

Every stream is a numpy ``Generator`` driven by the Philox-4x64-10 counter
based bit generator, seeded through ``SeedSequence``.  Sub-streams are
derived by spawning, or by mixing a stable 64-bit hash of a coordinate tuple
into the entropy pool, so adding work items never perturbs existing ones.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

RNG_ALGORITHM = "numpy.Philox4x64-10/SeedSequence"

MASK64 = (1 << 64) - 1


def make_rng(seed: int | np.random.SeedSequence | None = 0) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(None if seed is None else int(seed) & MASK64)
    return np.random.Generator(np.random.Philox(ss))


def stable_hash64(obj: Any) -> int:
    """64-bit BLAKE2b digest of the canonical JSON encoding of ``obj``."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def derive_seed(master_seed: int, coords: Any) -> int:
    """Mix ``master_seed`` with the coordinates of a work item into a 64-bit seed.

    The mixing function is SeedSequence([master, hash(coords)]) followed by
    taking the first 64 bits of its generated state; it depends only on the
    two inputs, never on iteration order.
    """
    ss = np.random.SeedSequence([int(master_seed) & MASK64, stable_hash64(coords)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in rng.bit_generator.seed_seq.spawn(n)]
