"""Counter-based random streams.

All randomness in the package comes from Philox-4x64 (``numpy.random.Philox``).
A stream is addressed by ``(seed, domain, *indices)``:

* the 128-bit Philox key is ``(seed mod 2**64, domain)``;
* the 256-bit counter starts at ``(0, i0, i1, i2)`` where ``i0..i2`` are the
  substream indices (missing ones are zero).

Philox increments the lowest counter word per block, so two substreams
never overlap unless one draws more than 2**64 blocks.  Because a stream
is a pure function of its address, results do not depend on how work is
split across threads or in which order substreams are consumed.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep unrelated consumers of the same seed apart.
INIT = 1
SPLIT = 2
SHUFFLE = 3
TRAIN_NOISE = 4
DOC_NOISE = 5
SELECTION = 6
KMEANS = 7
QUERY_NOISE = 8
SYNTH = 9
RANDOM_RANKER = 10

_MASK64 = (1 << 64) - 1


def stream(seed: int, domain: int, *indices: int) -> np.random.Generator:
    """Return the generator at address ``(seed, domain, *indices)``."""
    if len(indices) > 3:
        raise ValueError("at most three substream indices are supported")
    if any(i < 0 for i in indices):
        raise ValueError("substream indices must be non-negative")
    key = np.array([seed & _MASK64, domain & _MASK64], dtype=np.uint64)
    counter = np.zeros(4, dtype=np.uint64)
    for slot, idx in enumerate(indices, start=1):
        counter[slot] = idx & _MASK64
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
