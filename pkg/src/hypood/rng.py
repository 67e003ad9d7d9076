"""Named, splittable random streams.

All randomness goes through :func:`make_rng`, which builds a numpy
``Generator`` over the PCG64 bit generator from a ``SeedSequence`` keyed by
``(seed, crc32(name), *extra)``.  PCG64 output is fixed across platforms, so
a given ``(seed, name)`` pair always yields the same stream.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), stream_key(name), *[int(e) for e in extra]])
    return np.random.Generator(np.random.PCG64(ss))
