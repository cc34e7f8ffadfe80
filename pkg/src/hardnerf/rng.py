"""Counter-based random streams.

Every random draw in training is taken from a Philox stream keyed by
``(seed, purpose)`` with the iteration number placed in the counter, so a
given iteration's draws do not depend on how many numbers earlier
iterations consumed, or on the order in which phases run.
"""

from __future__ import annotations

import numpy as np

# purpose ids; keep stable, they are part of the reproducibility contract
PIXELS = 0
JITTER = 1
HARD_DRAW = 2
OCCUPANCY = 3
INIT = 4
DATASET = 5


def stream(seed: int, purpose: int, iteration: int = 0, item: int = 0) -> np.random.Generator:
    """Return a generator for ``(seed, purpose, iteration, item)``."""
    key = np.random.SeedSequence([int(seed), int(purpose)]).generate_state(2, np.uint64)
    counter = np.array([0, 0, int(item), int(iteration)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
