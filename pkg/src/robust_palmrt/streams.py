"""Counter-based random streams.

Every draw in the package comes from numpy's ``Philox4x64-10`` bit
generator keyed by ``(seed, domain << 32 | index)``.  A stream is therefore
a pure function of the user seed, a domain tag and an integer index, which
makes results independent of execution order and worker count.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep the data stream of trial ``t`` disjoint from the
# permutation stream of permutation ``b`` even when they share a seed.
PERMUTATION = 1
DATA = 2
CALIBRATION = 3
THEORY = 4

_MASK64 = (1 << 64) - 1


def stream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, domain, index)``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative integers")
    key = np.array(
        [int(seed) & _MASK64, ((int(domain) << 32) | int(index)) & _MASK64],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
