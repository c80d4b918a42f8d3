"""Counter-based random streams.

Every random draw in the package comes from :func:`stream`, which keys a
Philox generator by ``SeedSequence(seed, spawn_key=keys)``. Distinct key
tuples give statistically independent streams, and a stream depends only on
its own ``(seed, keys)``, so results do not depend on how work is scheduled
across workers.
"""
import numpy as np

SCHEME = "philox-seedsequence-v1"


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed derived from ``(seed, keys)`` by the same scheme."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
