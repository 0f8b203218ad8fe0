"""Counter-based random streams.

Every stream is a Philox generator keyed by (seed, index).  Streams for
different indices are independent and can be created in any order, so
results do not depend on how work is split across threads.
"""
import numpy as np

_MASK = (1 << 64) - 1


def stream(seed: int, index: int = 0) -> np.random.Generator:
    key = np.array([int(seed) & _MASK, int(index) & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# stream index offsets that keep independent uses of one seed apart
ANCESTORS = 1 << 40
CBI = 2 << 40
DIAGNOSTICS = 3 << 40
