"""Deterministic, replayable Gaussian streams on a counter-based generator.

The generator is fixed for the life of the repo so streams replay across
runs and platforms:

* word k of a stream with seed s is ``finalize(s + (k+1) * GOLDEN)`` where
  ``finalize`` is the SplitMix64 avalanche finalizer;
* uniforms map a word's top 53 bits into (0, 1];
* normals use the cosine branch of the Box-Muller transform on two
  consecutive words, so normal g of a stream consumes words 2g and 2g+1
  (counting from the stream cursor) and any draw is a pure function of
  (seed, cursor). Skipping is O(1).

Streams are value-like: deriving the same (step seed, layer id) twice gives
bitwise-identical sequences, and distinct layers never share a cursor, so
layers can be sampled in any order.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M64 = 0xFFFFFFFFFFFFFFFF
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB

# Domain salts keep seed families apart (noise vs. random masks vs. batches).
MASK_SALT = 0x6D61736B  # "mask"
BATCH_SALT = 0x62617463  # "batc"

_U64_GOLDEN = np.uint64(GOLDEN)
_U64_C1 = np.uint64(_C1)
_U64_C2 = np.uint64(_C2)
_INV_2_53 = 2.0**-53


def mix64(x):
    """SplitMix64 finalizer on a Python int (mod 2**64)."""
    x &= _M64
    x = ((x ^ (x >> 30)) * _C1) & _M64
    x = ((x ^ (x >> 27)) * _C2) & _M64
    return x ^ (x >> 31)


def hash_pair(a, b):
    """64-bit avalanche hash of an ordered pair; the repo's one mixing function."""
    h = mix64((a + GOLDEN) & _M64)
    return mix64(h ^ ((b & _M64) * GOLDEN & _M64))


def schedule_seed(base_seed, t):
    """Per-step seed: the base seed mixed with the step index."""
    return hash_pair(base_seed, t)


def _finalize_array(x):
    # x: uint64 array, consumed. Wraparound is the intended modular arithmetic.
    x ^= x >> np.uint64(30)
    x *= _U64_C1
    x ^= x >> np.uint64(27)
    x *= _U64_C2
    x ^= x >> np.uint64(31)
    return x


class NoiseStream:
    """Counter-based random stream; the cursor counts raw 64-bit words."""

    __slots__ = ("seed", "cursor")

    def __init__(self, seed, cursor=0):
        self.seed = int(seed) & _M64
        self.cursor = int(cursor)

    def _words(self, start, n):
        idx = np.arange(start, start + n, dtype=np.uint64)
        x = (idx + np.uint64(1)) * _U64_GOLDEN + np.uint64(self.seed)
        return _finalize_array(x)

    def uniform(self, n):
        """n uniforms in (0, 1]; consumes n words."""
        if n < 0:
            raise ValueError("n must be >= 0")
        words = self._words(self.cursor, n)
        self.cursor += n
        return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53

    def gaussian(self, n, dtype=np.float64):
        """n i.i.d. standard normals; consumes 2n words (one pair per draw)."""
        if n < 0:
            raise ValueError("n must be >= 0")
        words = self._words(self.cursor, 2 * n)
        self.cursor += 2 * n
        u = ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u1 = u[0::2]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.astype(dtype, copy=False)


def derive_substream(step_seed, layer_id):
    """Pure function of (step seed, layer id) -> an independent stream."""
    return NoiseStream(hash_pair(step_seed, layer_id))


def gaussian_fill(stream, n, dtype=np.float64):
    """Draw n standard normals from the stream (advances its cursor)."""
    return stream.gaussian(n, dtype=dtype)
