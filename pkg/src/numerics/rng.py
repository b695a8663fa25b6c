"""Seeded, platform-independent random streams.

Algorithm (fixed; changing it changes every generated artifact):

* SplitMix64 expands a 64-bit seed into the state of ``LANES`` independent
  xoshiro256** generators (four words each).
* Each draw advances all lanes once in lockstep using numpy uint64
  arithmetic (wrapping), yielding ``LANES`` 64-bit outputs ordered by lane.
  A request for n values consumes ceil(n / LANES) whole steps; unused
  outputs of the last step are discarded.
* Uniforms take the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1).
* Normals use the Box-Muller transform on pairs of uniforms.
* Named sub-streams hash the name (BLAKE2b, 8 bytes) and mix it with the
  parent seed through SplitMix64.

Integer state evolution is exact, so the raw stream is identical on
every platform.
"""

import hashlib
from typing import Tuple

import numpy as np

MASK64 = (1 << 64) - 1
LANES = 256

_U64 = np.uint64


def splitmix64(state: int) -> Tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Rng:
    """Lane-parallel xoshiro256** generator seeded through SplitMix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        words = []
        state = self.seed
        for _ in range(4 * LANES):
            state, output = splitmix64(state)
            words.append(output)
        self._state = np.array(words, dtype=_U64).reshape(4, LANES)

    def spawn(self, name: str) -> "Rng":
        """Independent child stream identified by name."""
        digest = int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")
        _, child_seed = splitmix64(self.seed ^ digest)
        return Rng(child_seed)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._state
        result = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._state[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        """n raw 64-bit outputs."""
        steps = -(-n // LANES)
        if steps == 0:
            return np.empty(0, dtype=_U64)
        return np.concatenate([self._step() for _ in range(steps)])[:n]

    def uniform(self, n: int) -> np.ndarray:
        """n floats in [0, 1)."""
        return (self.next_u64(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        """Gaussian samples of the given shape (Box-Muller)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        pairs = -(-count // 2)
        u1 = 1.0 - self.uniform(pairs)
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        samples = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return (loc + scale * samples).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n)."""
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable").astype(np.int64)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n integers in [low, high)."""
        span = high - low
        return (low + np.floor(self.uniform(n) * span)).astype(np.int64)
