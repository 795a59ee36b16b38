"""Named, splittable random streams.

Every stochastic step in the pipeline draws from a stream derived from
(seed, purpose, index) so that the results are independent of scheduling
and identical across runs: per-tree bootstrap draws, per-epoch batch
shuffles, per-class split shuffles, weight init, synthetic noise.
"""

import hashlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Return a Generator for the (seed, purpose, index) stream."""
    ss = np.random.SeedSequence((int(seed), _purpose_key(purpose), int(index)))
    return np.random.Generator(np.random.PCG64(ss))
