"""Domain-separated deterministic RNG streams.

Every random draw in the package comes from a Generator built here, keyed by
(master seed, domain, extra ids). Streams never share state, so adding draws
in one domain cannot shift any other domain's sequence between runs.
"""

from __future__ import annotations

import numpy as np

DATA = 0
MASK = 1
MIXUP = 2
INIT = 3
EVAL = 4
KMEANS = 5


def rng_for(master_seed: int, domain: int, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(int(domain),) + tuple(int(e) for e in extra))
    return np.random.default_rng(ss)
