"""Counter-based deterministic random primitives.

Everything that needs reproducible randomness independent of call order
(mock embeddings, dropout masks) is built on one bit-exact scheme:

1. A 64-bit FNV-1a hash absorbs a seed (8 little-endian bytes) followed by
   a byte payload, producing a stream state.
2. The i-th raw output of a stream (1-based) is splitmix64_mix(state + i * GOLDEN)
   with all arithmetic mod 2**64.
3. Uniforms in (0, 1) are ((raw >> 11) + 0.5) * 2**-53.
4. Normals are produced from consecutive uniform pairs via Box-Muller:
   r = sqrt(-2 ln u1), then r*cos(2*pi*u2), r*sin(2*pi*u2).

The scheme is pure arithmetic on the counter, so any slice of a stream can
be generated independently and the whole thing vectorizes.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_U64_GOLDEN = np.uint64(GOLDEN)
_U64_MIX1 = np.uint64(_MIX1)
_U64_MIX2 = np.uint64(_MIX2)


def hash_stream_state(payload: bytes, seed: int) -> int:
    """FNV-1a over 8 seed bytes (little-endian) then the payload bytes."""
    h = _FNV_OFFSET
    for b in (seed & _MASK64).to_bytes(8, "little") + payload:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _U64_MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _U64_MIX2
    return z ^ (z >> np.uint64(31))


def raw64(state: int, start: int, count: int) -> np.ndarray:
    """Outputs start+1 .. start+count of the stream, as uint64."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    return _mix(np.uint64(state & _MASK64) + idx * _U64_GOLDEN)


def uniforms(state: int, count: int, start: int = 0) -> np.ndarray:
    """`count` uniforms in the open interval (0, 1), float64."""
    z = raw64(state, start, count)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(state: int, count: int, start: int = 0) -> np.ndarray:
    """`count` standard normals via Box-Muller on consecutive uniform pairs."""
    pairs = (count + 1) // 2
    u = uniforms(state, 2 * pairs, start=start)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


def uniform_matrix(states: np.ndarray, count: int) -> np.ndarray:
    """Row i holds the first `count` uniforms of stream states[i].

    Vectorized over streams; used for per-token dropout masks.
    """
    states = states.astype(np.uint64, copy=False).reshape(-1, 1)
    idx = np.arange(1, count + 1, dtype=np.uint64).reshape(1, -1)
    z = _mix(states + idx * _U64_GOLDEN)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def derive_states(base_state: int, indices: np.ndarray) -> np.ndarray:
    """Independent stream states derived from a base state and counters."""
    idx = indices.astype(np.uint64, copy=False) + np.uint64(1)
    return _mix(np.uint64(base_state & _MASK64) + idx * _U64_GOLDEN)
