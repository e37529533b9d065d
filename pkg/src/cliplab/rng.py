"""Keyed, counter-based uniform draws.

Every stochastic quantity in a training run is addressed by an integer key
tuple such as ``(seed, step, epoch, response_id, position)``. Hashing the key
gives the draw directly, so results never depend on evaluation order or on
how work is split across threads.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = x ^ (x >> _S30)
    x = x * _M1
    x = x ^ (x >> _S27)
    x = x * _M2
    return x ^ (x >> _S31)


def keyed_uniforms(*keys) -> np.ndarray:
    """Uniform draws on [0, 1) addressed by broadcastable integer keys.

    Scalars and arrays may be mixed; the output has the broadcast shape.
    """
    arrays = np.broadcast_arrays(*[np.asarray(k, dtype=np.int64) for k in keys])
    with np.errstate(over="ignore"):
        h = np.full(arrays[0].shape, 0x6A09E667F3BCC909, dtype=np.uint64)
        for a in arrays:
            h = _mix(h + _GOLDEN + a.astype(np.uint64))
    return (h >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)


def derive_seed(*keys) -> int:
    """A 63-bit integer seed derived from a key tuple."""
    return int(keyed_uniforms(*keys) * 9007199254740992.0)
