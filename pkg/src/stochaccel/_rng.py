"""Counter-based random numbers.

Every draw is a pure function of (seed, stream labels), so results never
depend on call order, worker count or chunking.  The generator hashes the
label words through the SplitMix64 finalizer and maps pairs of 64-bit
words to normals via Box-Muller.  All operations are uint64 arithmetic
plus libm transcendentals, identical across runs on a given platform.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def _mix(x):
    """SplitMix64 finalizer, elementwise on uint64 arrays (wrapping)."""
    x = (x ^ (x >> _S30)) * _MIX1
    x = (x ^ (x >> _S27)) * _MIX2
    return x ^ (x >> _S31)


def _hash_words(seed, *words):
    """Fold label words into one hashed uint64 array (broadcasting)."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed) + _GOLDEN)
        for w in words:
            h = _mix(h ^ (np.asarray(w, dtype=np.uint64) + _GOLDEN))
    return h


def uniforms(seed, *words):
    """Uniform doubles in (0, 1], one per broadcast element of `words`."""
    bits = _hash_words(seed, *words)
    return ((bits >> _S11).astype(np.float64) + 1.0) * _INV53


def normals(seed, *words):
    """Standard normals, one per broadcast element of `words`.

    Uses two hashed sub-streams (draw index 0 and 1) and the Box-Muller
    cosine branch.
    """
    u1 = uniforms(seed, *words, 0)
    u2 = uniforms(seed, *words, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def substream(seed, *words) -> int:
    """Derive a child seed from labels (for nested generators)."""
    return int(_hash_words(seed, *words))


def unit_sphere(seed, *words):
    """Uniform unit vectors in R^3, one per broadcast element of `words`."""
    comps = np.stack([normals(seed, *words, axis) for axis in range(3)], axis=-1)
    norm = np.sqrt(np.sum(comps * comps, axis=-1, keepdims=True))
    return comps / norm
