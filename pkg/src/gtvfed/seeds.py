"""Named, reproducible random streams derived from a single master seed."""

from __future__ import annotations

import numpy as np

# Fixed stream table. Adding a stream must never renumber existing entries,
# otherwise old configs stop reproducing.
STREAMS = {
    "graph": 0,
    "data": 1,
    "batches": 2,
    "schedule": 3,
    "attacks": 4,
    "noise": 5,
}


def stream(master_seed: int, name: str, *members: int) -> np.random.Generator:
    """Generator for the named stream, optionally split per member id.

    Each (stream, members) combination yields an independent generator, so
    toggling one randomized component never reshuffles the draws of another.
    """
    try:
        key = STREAMS[name]
    except KeyError:
        raise ValueError(
            f"unknown stream name {name!r}; expected one of {sorted(STREAMS)}"
        ) from None
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(key, *map(int, members)))
    return np.random.default_rng(ss)


def as_rng(seed) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed))
