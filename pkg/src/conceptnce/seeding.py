"""Named random sub-streams derived from one 64-bit run seed."""

from __future__ import annotations

import numpy as np

STREAMS = {"data": 1, "sampling": 2, "init": 3}


def stream(seed: int, name: str, *path: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` (optionally indexed by ``path``)."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(STREAMS[name], *path))
    return np.random.Generator(np.random.PCG64(ss))
