"""
Named random substreams derived from one root seed.

Every draw in a simulation comes from a substream addressed by a path such as
("network", 3) or ("node", "A", 3). The path is hashed into a SeedSequence
spawn key and fed to a counter-based Philox generator, so:
- (root seed, path) fully determines the stream on every platform;
- draws from one path never shift the draws of another;
- replicates can run in any order or in parallel.
"""

from __future__ import annotations

import hashlib
from typing import Tuple

import numpy as np

from src.errors import ParameterError

_UNIT = 2.0 ** -53


def _path_key(path: Tuple) -> Tuple[int, ...]:
    """Spawn key for a path: every 32-bit word of each part's 128-bit blake2b digest."""
    key = []
    for part in path:
        digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=16).digest()
        key.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, len(digest), 4))
    return tuple(key)


class RngStreams:
    def __init__(self, seed: int, domain: str = "sim"):
        if seed < 0 or seed >= 2 ** 64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.domain = domain

    def __repr__(self) -> str:
        return f"RngStreams(seed={self.seed}, domain={self.domain!r})"

    def generator(self, *path) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=_path_key((self.domain,) + path))
        return np.random.Generator(np.random.Philox(seq))

    def uniforms(self, n: int, *path) -> np.ndarray:
        """n uniforms strictly inside (0, 1); entry i is unit i's exogenous error."""
        bits = self.generator(*path).integers(0, 2 ** 53, size=n, dtype=np.int64)
        return (bits.astype(np.float64) + 0.5) * _UNIT
