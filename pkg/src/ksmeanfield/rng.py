"""Counter-based normal variates (Philox4x32-10).

Every draw is a pure function of ``(seed, stream, counter)``, so the Brownian
increment of particle ``i`` at step ``k`` is the same no matter which system
consumes it, in which order, or on how many threads.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

# stream tags separate independent uses of one seed
NOISE = 0
INITIAL = 1
REPLICA = 2


def philox4x32(counter, key, rounds=10):
    """Vectorized Philox4x32 block function.

    Parameters
    ----------
    counter : array_like of uint32, shape (..., 4)
    key : array_like of uint32, shape (2,) or (..., 2)

    Returns
    -------
    ndarray of uint32, shape (..., 4)
    """
    ctr = np.asarray(counter, dtype=np.uint64) & _MASK
    k = np.asarray(key, dtype=np.uint64) & _MASK
    c0, c1, c2, c3 = (ctr[..., j].copy() for j in range(4))
    k0 = np.broadcast_to(k[..., 0], c0.shape).copy()
    k1 = np.broadcast_to(k[..., 1], c0.shape).copy()
    for _ in range(rounds):
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def _key(seed):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)


def _counters(ids, stream, step):
    ids = np.asarray(ids, dtype=np.uint64)
    step = int(step)
    ctr = np.empty(ids.shape + (4,), dtype=np.uint64)
    ctr[..., 0] = ids & _MASK
    ctr[..., 1] = (ids >> _SHIFT) ^ np.uint64(stream << 24)
    ctr[..., 2] = step & 0xFFFFFFFF
    ctr[..., 3] = (step >> 32) & 0xFFFFFFFF
    return ctr


def uniform_pairs(seed, ids, stream, step):
    """Two uniforms in the open interval (0, 1) per id, 53-bit resolution."""
    words = philox4x32(_counters(ids, stream, step), _key(seed)).astype(np.uint64)
    a = ((words[..., 0] >> np.uint64(5)) << np.uint64(26)) + (words[..., 1] >> np.uint64(6))
    b = ((words[..., 2] >> np.uint64(5)) << np.uint64(26)) + (words[..., 3] >> np.uint64(6))
    scale = 1.0 / 9007199254740992.0
    return (a.astype(np.float64) + 0.5) * scale, (b.astype(np.float64) + 0.5) * scale


def standard_normal_pairs(seed, ids, stream, step):
    """Box-Muller transform of :func:`uniform_pairs`; shape ``ids.shape + (2,)``."""
    u1, u2 = uniform_pairs(seed, ids, stream, step)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def brownian_increments(seed, ids, step, dt):
    """Increments ``B_i(t_{k+1}) - B_i(t_k)`` with covariance ``dt * I_2``."""
    return np.sqrt(dt) * standard_normal_pairs(seed, ids, NOISE, step)


def replica_seed(seed, replica):
    """Derive an independent 64-bit seed for Monte Carlo replica ``replica``."""
    w = philox4x32(_counters(np.array([replica]), REPLICA, 0), _key(seed))[0]
    return int(w[0]) | (int(w[1]) << 32)
