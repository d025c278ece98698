"""Named, counter-derived RNG streams.

Every random draw in a run comes from ``stream(seed, name, *counters)``, so
client init, batch order, DP noise per (client, round) and so on are
reproducible and mutually independent regardless of call order.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
