"""Named random sub-streams derived from a single 64-bit root seed.

Each consumer asks for its own stream by name, so adding a new consumer never
shifts the numbers another one sees.
"""

import hashlib
import os

import numpy as np

MASK64 = (1 << 64) - 1
DEFAULT_SEED = 0


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return a generator for the sub-stream ``name`` of ``root_seed``."""
    seq = np.random.SeedSequence([int(root_seed) & MASK64, _name_key(name)])
    return np.random.default_rng(seq)


def derive_seed(root_seed: int, name: str) -> int:
    """A 64-bit child seed, for APIs that take an integer seed."""
    rng = substream(root_seed, name)
    return int(rng.integers(0, 2**63 - 1, dtype=np.int64))


def default_seed() -> int:
    """Seed fallback: ``SGDD_SEED`` from the environment, else 0."""
    raw = os.environ.get("SGDD_SEED")
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    return int(raw, 0) & MASK64
