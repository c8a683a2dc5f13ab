"""Pure-Python (numpy + zlib) implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with identical output for
identical input; ``direct_store.kernels`` picks one at import time.
"""

import math
import zlib

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = 0xFFFFFFFFFFFFFFFF
MC_SALT = 0xD1B54A32D192ED03
_U53 = 1.0 / 9007199254740992.0

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

BATCH = 1 << 18


def mix64(z):
    """splitmix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64_array(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _uniform(z):
    return ((z >> _S11).astype(np.float64) + 0.5) * _U53


# -- checksums ---------------------------------------------------------------


def crc32_pieces(data, piece):
    mv = memoryview(data).cast("B")
    n = len(mv)
    count = (n + piece - 1) // piece
    out = np.empty(count, dtype=np.uint32)
    for i in range(count):
        out[i] = zlib.crc32(mv[i * piece:(i + 1) * piece])
    return out


def bad_pieces(data, checksums, piece, first=0):
    mv = memoryview(data).cast("B")
    n = len(mv)
    count = (n + piece - 1) // piece
    bad = []
    for i in range(count):
        if zlib.crc32(mv[i * piece:(i + 1) * piece]) != int(checksums[first + i]):
            bad.append(i)
    return np.asarray(bad, dtype=np.int64)


def majority3(a, b, c):
    n = len(a)
    if len(b) != n or len(c) != n:
        raise ValueError("majority3 needs equal-length inputs")
    x = int.from_bytes(a, "little")
    y = int.from_bytes(b, "little")
    z = int.from_bytes(c, "little")
    return ((x & y) | (x & z) | (y & z)).to_bytes(n, "little")


def apply_flips(buf, positions):
    """XOR single bits into a writable buffer; bit i is ``1 << (i & 7)`` of byte ``i >> 3``."""
    arr = np.frombuffer(buf, dtype=np.uint8)
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size == 0:
        return
    if pos.min() < 0 or pos.max() >= arr.size * 8:
        raise IndexError("flip position outside buffer")
    masks = np.left_shift(np.uint8(1), (pos & 7).astype(np.uint8))
    np.bitwise_xor.at(arr, pos >> 3, masks)


# -- geometric-gap bit flips -------------------------------------------------


def geometric_flips(keys, first_seg, seg_bits, total_bits, log1m):
    """Bit positions flipped by independent Bernoulli trials, one stream per segment.

    Segment ``first_seg + i`` covers bits ``[(first_seg+i)*seg_bits, ...)``
    clipped to ``total_bits`` and draws from the counter stream seeded by
    ``keys[i]``.  ``log1m`` is ``log1p(-p)``; gaps are ``floor(log(u)/log1m)``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    if keys.size == 0 or log1m == 0.0:
        return np.empty(0, dtype=np.int64)
    starts = (np.arange(keys.size, dtype=np.int64) + first_seg) * seg_bits
    limits = np.minimum(seg_bits, total_bits - starts)
    state = keys.copy()
    pos = np.zeros(keys.size, dtype=np.int64)
    active = np.nonzero(limits > 0)[0]
    found_seg = []
    found_pos = []
    while active.size:
        state[active] += _G
        u = _uniform(mix64_array(state[active]))
        gap = np.floor(np.log(u) / log1m)
        room = (limits[active] - pos[active]).astype(np.float64)
        hit = gap < room
        active = active[hit]
        if not active.size:
            break
        pos[active] += gap[hit].astype(np.int64)
        found_seg.append(active)
        found_pos.append(pos[active].copy())
        pos[active] += 1
        active = active[pos[active] < limits[active]]
    if not found_seg:
        return np.empty(0, dtype=np.int64)
    seg = np.concatenate(found_seg)
    off = np.concatenate(found_pos)
    # streams emit in order; a stable sort by segment restores (segment, offset) order
    order = np.argsort(seg, kind="stable")
    return starts[seg[order]] + off[order]


# -- Monte Carlo trial loops -------------------------------------------------


def _trial_keys(seed, lo, hi, replication, replica):
    seed_key = np.uint64(mix64(seed ^ MC_SALT))
    idx = np.arange(lo, hi, dtype=np.uint64) * np.uint64(replication) + np.uint64(replica)
    return mix64_array(seed_key ^ (idx * _G))


def mc_block_failures(block_bits, replication, log1m, trials, seed):
    """Trials in which every replica draws at least one flipped bit."""
    if log1m == 0.0:
        return 0
    failures = 0
    limit = float(block_bits)
    for lo in range(0, trials, BATCH):
        hi = min(trials, lo + BATCH)
        alive = np.ones(hi - lo, dtype=bool)
        for r in range(replication):
            idx = np.nonzero(alive)[0]
            if not idx.size:
                break
            keys = _trial_keys(seed, lo, hi, replication, r)[idx]
            u = _uniform(mix64_array(keys + _G))
            gap = np.floor(np.log(u) / log1m)
            alive[idx[gap >= limit]] = False
        failures += int(alive.sum())
    return failures


def mc_chunk_failures(block_bits, chunk_bits, replication, log1m, trials, seed):
    """Trials in which some chunk position holds a flipped bit on every replica."""
    if log1m == 0.0:
        return 0
    nchunks = (block_bits + chunk_bits - 1) // chunk_bits
    nwords = (nchunks + 63) // 64
    failures = 0
    for lo in range(0, trials, BATCH):
        hi = min(trials, lo + BATCH)
        n = hi - lo
        common = None
        alive = np.ones(n, dtype=bool)
        for r in range(replication):
            idx = np.nonzero(alive)[0]
            if not idx.size:
                break
            state = _trial_keys(seed, lo, hi, replication, r)[idx]
            bad = np.zeros((idx.size, nwords), dtype=np.uint64)
            pos = np.zeros(idx.size, dtype=np.int64)
            act = np.arange(idx.size)
            while act.size:
                state[act] += _G
                u = _uniform(mix64_array(state[act]))
                gap = np.floor(np.log(u) / log1m)
                hit = gap < (block_bits - pos[act]).astype(np.float64)
                act = act[hit]
                if not act.size:
                    break
                p = pos[act] + gap[hit].astype(np.int64)
                c = p // chunk_bits
                bad[act, c >> 6] |= np.left_shift(np.uint64(1), (c & 63).astype(np.uint64))
                pos[act] = (c + 1) * chunk_bits
                act = act[pos[act] < block_bits]
            if common is None:
                common = np.zeros((n, nwords), dtype=np.uint64)
                common[idx] = bad
            else:
                common[idx] &= bad
            alive[idx] = common[idx].any(axis=1)
        failures += int(alive.sum())
    return failures


def log1m(p):
    return math.log1p(-p) if p < 1.0 else -math.inf
