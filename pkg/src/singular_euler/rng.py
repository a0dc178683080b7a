"""Counter-based random streams.

Every variate is a pure function of ``(seed, stream, substream, counter)``, so
any sample can be regenerated in isolation and batches can be split across
workers arbitrarily.

Construction (all arithmetic modulo 2^64, ``mix`` is the SplitMix64 finalizer)::

    root   = mix(seed)
    skey   = mix(root + (stream + 1) * GOLDEN)
    subkey = mix(skey ^ SUBSTREAM_SALT[substream])
    raw    = mix(subkey + (counter + 1) * GOLDEN)

Uniforms are ``((raw >> 11) + 0.5) * 2^-53`` (open interval (0, 1)); normals
are ``ndtri(uniform)`` (inverse CDF).
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

BROWNIAN = 0
TIME = 1
SUBSTREAM_SALT = (np.uint64(0x243F6A8885A308D3), np.uint64(0x13198A2E03707344))

_TWO_M53 = 2.0 ** -53


def mix64(z) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.array(z, dtype=np.uint64, copy=True, ndmin=1)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


def substream_keys(seed: int, streams, substream: int) -> np.ndarray:
    """Keys for ``(seed, stream, substream)``; ``streams`` may be an array."""
    streams = np.asarray(streams, dtype=np.uint64)
    root = mix64(np.uint64(seed % 2**64))[0]
    with np.errstate(over="ignore"):
        skey = mix64(root + (streams + np.uint64(1)) * GOLDEN)
    return mix64(skey ^ SUBSTREAM_SALT[substream]).reshape(streams.shape)


def raw_bits(keys, counters) -> np.ndarray:
    """Raw 64-bit outputs; ``keys`` and ``counters`` broadcast together."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = keys + (counters + np.uint64(1)) * GOLDEN
    shape = np.broadcast_shapes(keys.shape, counters.shape)
    return mix64(np.broadcast_to(z, shape)).reshape(shape)


def uniforms(keys, counters) -> np.ndarray:
    r = raw_bits(keys, counters)
    return ((r >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def normals(keys, counters) -> np.ndarray:
    return ndtri(uniforms(keys, counters))
