"""Counter-based random streams keyed by ``(seed, stream_id)``."""

import numpy as np


def make_rng(seed, stream=0):
    """Return a Philox generator for ``(seed, stream)``.

    An existing ``numpy.random.Generator`` is passed through untouched, so
    callers can thread one generator through several draws.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(stream, (tuple, list)):
        key = tuple(int(s) for s in stream)
    else:
        key = (int(stream),)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
