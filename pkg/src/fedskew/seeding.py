"""Named random streams.

Every random draw in the package comes from ``make_rng(seed, *path)`` where
``path`` is a tuple of small integers (client id, round, epoch, stream tag).
Streams depend only on their path, so results do not depend on the order in
which clients are scheduled.
"""

from __future__ import annotations

import numpy as np

# stream tags
PARTITION = 11
SKEW_CLASS = 12
INIT = 13
LOCAL = 21
UNLEARN = 31
AUTOENCODER = 41
AE_INIT = 42
SMOTE = 43
SYNTHETIC = 51


def make_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(p) for p in path)])


def derive_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed unique to ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed), *(int(p) for p in path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
