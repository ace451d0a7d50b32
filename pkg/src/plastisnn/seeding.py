"""Counter-based random streams.

All randomness in the package flows from one root seed. Named streams
(env, policy, noise, init) are derived with a counter so that iteration k
of a training run always sees the same draws, whether it is reached by an
uninterrupted run or by resuming from a checkpoint.
"""

import zlib

import numpy as np


def stream(root_seed: int, name: str, counter: int = 0) -> np.random.Generator:
    """Derive an independent generator for (root_seed, name, counter)."""
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(tag, int(counter)))
    return np.random.Generator(np.random.Philox(ss))
