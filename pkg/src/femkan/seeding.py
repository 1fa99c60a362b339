"""Named random sub-streams derived from a single experiment seed."""
import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; streams never perturb each other."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
