"""Named, reproducible random substreams derived from one root seed.

Every source of randomness in the pipeline (data generation, parameter
init, training-step draws, sampling) pulls its own named stream so that
stages can be re-run independently and bit-exactly.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the (seed, name) pair; same pair -> same stream."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
