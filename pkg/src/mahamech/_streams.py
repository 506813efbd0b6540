"""Reproducible random sub-streams.

Every random draw in the package comes from a Philox4x64 counter-based
generator keyed by ``numpy.random.SeedSequence(seed, spawn_key=key)``. A key
is a tuple of non-negative integers naming the stream, e.g.
``(MECHANISM, record_id, position)``. SeedSequence hashes the key with the
seed, so streams with different keys are statistically independent and a
draw never depends on which other streams were used before it, or on which
worker used them.

Each noise stream is split into two generators: one feeds the Gaussian
direction and the other the Gamma radius. Because of the split, drawing
``count`` samples in one call consumes exactly the same values as ``count``
single-sample calls.
"""

from numbers import Integral

import numpy as np

#: Changes whenever the key layout or the generator family changes.
RNG_VERSION = "philox4x64+seedseq/v1"

# First element of every key; keeps the subsystems' streams disjoint.
SAMPLER = 0
MECHANISM = 1
EXPERIMENT = 2
AUDIT = 3

_DIRECTION = 0
_RADIUS = 1


def as_key(stream):
    """Normalise an int or a tuple of ints into a stream key."""
    if isinstance(stream, Integral) and not isinstance(stream, bool):
        stream = (stream,)
    key = tuple(stream)
    for part in key:
        if isinstance(part, bool) or not isinstance(part, Integral) or part < 0:
            raise ValueError(f"stream ids must be non-negative integers, got {stream!r}")
    return tuple(int(p) for p in key)


def generator(seed, key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def noise_generators(seed, key):
    """Return the ``(direction_rng, radius_rng)`` pair of a noise stream."""
    return generator(seed, key + (_DIRECTION,)), generator(seed, key + (_RADIUS,))
