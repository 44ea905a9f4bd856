"""Counter-based random streams keyed by (seed, purpose, worker, round).

Every random draw in a distributed run comes from a Philox stream whose key
depends only on who draws and when, so results do not depend on the order
in which simulated workers are scheduled. Element ``j`` of a vector always
consumes the ``j``-th value of its stream.
"""

from __future__ import annotations

import numpy as np

# stream purposes; kept stable because they feed the key derivation
QUANTIZE = 1
REDUCE = 2
MINIBATCH = 3
DATA = 4
TRIAL = 5


def stream(seed: int, purpose: int, worker: int = 0, round_: int = 0, step: int = 0) -> np.random.Generator:
    """Return an independent generator for one (seed, purpose, worker, round, step) key."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, purpose, worker, round_, step]
    key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniforms(seed: int, purpose: int, worker: int, round_: int, size, step: int = 0) -> np.ndarray:
    """Uniform [0, 1) draws for one keyed stream."""
    return stream(seed, purpose, worker, round_, step).random(size)
