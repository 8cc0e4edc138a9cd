import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for a named sub-stream of ``seed``.

    Each stage (partition, init, selection, ...) draws from its own stream so
    that changing how much randomness one stage consumes never shifts another.
    """
    key = [int(seed), zlib.crc32(name.encode())] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))
