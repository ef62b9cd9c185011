"""Deterministic random streams.

Every source of randomness in the package is drawn from a named stream so
that independent pipeline stages (data synthesis, initialisation, batch
sampling, ...) never share or perturb each other's state.  A stream is a
numpy Philox generator keyed by the user seed together with a stable hash
of the stream tag.  Stable means sha256, not Python's per-process salted
``hash``, so the same (seed, tag) pair yields the same stream in every
interpreter run.
"""

import hashlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    """Return an independent generator for (seed, tag).

    Distinct tags give statistically independent streams; drawing from one
    has no effect on any other.
    """
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8, 16, 24)]
    # Philox keys are two 64-bit words: the user seed and a digest word.
    # The remaining digest words go into the starting counter, so streams
    # with equal seeds but different tags never overlap in practice.
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, words[0]]
    counter = [words[1], words[2], words[3], 0]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
