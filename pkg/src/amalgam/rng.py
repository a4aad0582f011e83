"""Named, independent random streams.

Every randomized component (weight init, batch shuffling, scene synthesis)
draws from its own stream derived from (root seed, label path). Adding or
removing one component therefore never shifts the draws of another, which
is what makes reduced runs (e.g. a zero-weighted teacher) bit-reproducible
against their full counterparts.
"""

import zlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Return a PCG64 generator for the given root seed and label path."""
    words = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            words.append(int(label) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
