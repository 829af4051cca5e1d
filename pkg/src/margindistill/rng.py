"""Deterministic random streams.

All randomness in the library flows through Philox, a counter-based
generator whose output is identical across platforms for a given key.
Independent streams are derived from a user seed plus an integer tag so
that, e.g., weight initialization and batch shuffling never share state.
"""

import numpy as np

# Stream tags. Keep values stable: changing them changes every seeded run.
DIRECTIONS = 0
NOISE = 1
SPLIT = 2
PAIRS = 3
IDENT = 4
INIT = 5
SHUFFLE = 6
TRIPLETS = 7
CENTERS = 8


def stream(seed: int, tag: int, *subkey: int) -> np.random.Generator:
    """Return an independent generator for (seed, tag, *subkey)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag), *map(int, subkey)))
    return np.random.Generator(np.random.Philox(ss))
