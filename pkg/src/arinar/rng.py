"""Seeded random streams.

Every random draw in the package goes through a Philox counter-based
generator keyed by a ``SeedSequence`` built from ``(seed, purpose, *index)``.
That makes each stream independently addressable: sequence ``i`` of a
dataset, or image ``j`` of a sampling run, can be reproduced without
replaying the streams before it.
"""
from __future__ import annotations

import numpy as np

# Stream purposes. Values are part of the reproducibility contract.
INIT = 1
DATA = 2
SHUFFLE = 3
DROPOUT = 4
SAMPLE = 5
GRADCHECK = 6

GENERATOR_NAME = "numpy.Philox(SeedSequence([seed, purpose, *index]))"


def make_rng(seed: int, purpose: int, *index: int) -> np.random.Generator:
    """Generator for stream ``(seed, purpose, *index)``."""
    entropy = [int(seed), int(purpose), *(int(i) for i in index)]
    if any(e < 0 for e in entropy):
        raise ValueError(f"stream key must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    state = rng.bit_generator.state

    def _plain(v):
        if isinstance(v, dict):
            return {k: _plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v.tolist()]
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return _plain(state)


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    restored = dict(state)
    restored["state"] = {
        "counter": np.asarray(state["state"]["counter"], dtype=np.uint64),
        "key": np.asarray(state["state"]["key"], dtype=np.uint64),
    }
    restored["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
    bg.state = restored
    return np.random.Generator(bg)
