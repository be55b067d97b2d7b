"""Named random substreams derived from one integer seed.

Each consumer (model init, noise init, data shuffling, permutations, ...)
draws from its own stream, so adding draws in one place never shifts the
numbers another experiment sees.
"""

from __future__ import annotations

import zlib

import numpy as np

MODEL_INIT = "model-init"
NOISE_INIT = "noise-init"
DATA_SHUFFLE = "data-shuffle"
PERMUTATION = "permutation"
DATA_SYNTH = "data-synth"


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
