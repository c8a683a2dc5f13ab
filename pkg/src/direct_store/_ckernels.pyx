# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts and outputs as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, log
from libc.stdint cimport int64_t, uint32_t, uint64_t
from libc.stdlib cimport calloc, free
from libc.string cimport memset

cnp.import_array()

cdef extern from "_crc.h":
    uint32_t ds_crc32(const unsigned char *buf, size_t len) nogil
    const char *DS_CRC_IMPL

CRC_IMPL = DS_CRC_IMPL.decode()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MC_SALT = 0xD1B54A32D192ED03ULL
cdef double U53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _gap(uint64_t *state, double log1m) nogil:
    state[0] += GOLDEN
    cdef uint64_t z = _mix64(state[0])
    cdef double u = (<double>(z >> 11) + 0.5) * U53
    return floor(log(u) / log1m)


def mix64(z):
    return _mix64(<uint64_t>(z & 0xFFFFFFFFFFFFFFFF))


def crc32_pieces(const unsigned char[::1] data, Py_ssize_t piece):
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t count = (n + piece - 1) // piece
    cdef cnp.ndarray[cnp.uint32_t, ndim=1] out = np.empty(count, dtype=np.uint32)
    cdef Py_ssize_t i, start, ln
    with nogil:
        for i in range(count):
            start = i * piece
            ln = piece if start + piece <= n else n - start
            out[i] = ds_crc32(&data[start], <size_t>ln)
    return out


def bad_pieces(const unsigned char[::1] data, checksums, Py_ssize_t piece, Py_ssize_t first=0):
    cdef const uint32_t[::1] sums = np.ascontiguousarray(checksums, dtype=np.uint32)
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t count = (n + piece - 1) // piece
    if first + count > sums.shape[0]:
        raise IndexError("checksum array shorter than data")
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(count, dtype=np.int64)
    cdef Py_ssize_t i, start, ln, k = 0
    with nogil:
        for i in range(count):
            start = i * piece
            ln = piece if start + piece <= n else n - start
            if ds_crc32(&data[start], <size_t>ln) != sums[first + i]:
                out[k] = i
                k += 1
    return out[:k].copy()


def majority3(const unsigned char[::1] a, const unsigned char[::1] b, const unsigned char[::1] c):
    cdef Py_ssize_t n = a.shape[0]
    if b.shape[0] != n or c.shape[0] != n:
        raise ValueError("majority3 needs equal-length inputs")
    out = bytearray(n)
    cdef unsigned char[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = (a[i] & b[i]) | (a[i] & c[i]) | (b[i] & c[i])
    return bytes(out)


def apply_flips(unsigned char[::1] buf, positions):
    cdef const int64_t[::1] pos = np.ascontiguousarray(positions, dtype=np.int64)
    cdef Py_ssize_t n = pos.shape[0]
    cdef int64_t limit = <int64_t>buf.shape[0] * 8
    cdef Py_ssize_t i
    for i in range(n):
        if pos[i] < 0 or pos[i] >= limit:
            raise IndexError("flip position outside buffer")
    with nogil:
        for i in range(n):
            buf[pos[i] >> 3] ^= <unsigned char>(1 << (pos[i] & 7))


def geometric_flips(keys, int64_t first_seg, int64_t seg_bits, int64_t total_bits, double log1m):
    cdef const uint64_t[::1] k = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef Py_ssize_t nseg = k.shape[0]
    if nseg == 0 or log1m == 0.0:
        return np.empty(0, dtype=np.int64)
    cdef Py_ssize_t cap = 64, count = 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(cap, dtype=np.int64)
    cdef Py_ssize_t i
    cdef int64_t start, limit, pos
    cdef uint64_t state
    cdef double g
    for i in range(nseg):
        start = (first_seg + i) * seg_bits
        limit = seg_bits if total_bits - start > seg_bits else total_bits - start
        if limit <= 0:
            continue
        state = k[i]
        pos = 0
        while True:
            g = _gap(&state, log1m)
            if g >= <double>(limit - pos):
                break
            pos += <int64_t>g
            if count == cap:
                cap *= 2
                out = np.resize(out, cap)
            out[count] = start + pos
            count += 1
            pos += 1
            if pos >= limit:
                break
    return out[:count].copy()


cdef inline uint64_t _trial_key(uint64_t seed_key, uint64_t idx) nogil:
    return _mix64(seed_key ^ (idx * GOLDEN))


def mc_block_failures(int64_t block_bits, int64_t replication, double log1m, int64_t trials, seed):
    if log1m == 0.0:
        return 0
    cdef uint64_t seed_key = _mix64((<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)) ^ MC_SALT)
    cdef int64_t t, r, failures = 0
    cdef uint64_t state
    cdef double limit = <double>block_bits
    cdef bint all_bad
    with nogil:
        for t in range(trials):
            all_bad = True
            for r in range(replication):
                state = _trial_key(seed_key, <uint64_t>(t * replication + r))
                if _gap(&state, log1m) >= limit:
                    all_bad = False
                    break
            if all_bad:
                failures += 1
    return failures


def mc_chunk_failures(int64_t block_bits, int64_t chunk_bits, int64_t replication,
                      double log1m, int64_t trials, seed):
    if log1m == 0.0:
        return 0
    cdef uint64_t seed_key = _mix64((<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)) ^ MC_SALT)
    cdef int64_t nchunks = (block_bits + chunk_bits - 1) // chunk_bits
    cdef int64_t nwords = (nchunks + 63) // 64
    cdef uint64_t *common = <uint64_t *>calloc(nwords, sizeof(uint64_t))
    cdef uint64_t *bad = <uint64_t *>calloc(nwords, sizeof(uint64_t))
    if common == NULL or bad == NULL:
        free(common)
        free(bad)
        raise MemoryError()
    cdef int64_t t, r, w, pos, c, failures = 0
    cdef uint64_t state, any_left
    cdef double g
    try:
        with nogil:
            for t in range(trials):
                any_left = 1
                for r in range(replication):
                    memset(bad, 0, nwords * sizeof(uint64_t))
                    state = _trial_key(seed_key, <uint64_t>(t * replication + r))
                    pos = 0
                    while True:
                        g = _gap(&state, log1m)
                        if g >= <double>(block_bits - pos):
                            break
                        pos += <int64_t>g
                        c = pos // chunk_bits
                        bad[c >> 6] |= (<uint64_t>1) << (c & 63)
                        pos = (c + 1) * chunk_bits
                        if pos >= block_bits:
                            break
                    any_left = 0
                    for w in range(nwords):
                        if r == 0:
                            common[w] = bad[w]
                        else:
                            common[w] &= bad[w]
                        any_left |= common[w]
                    if any_left == 0:
                        break
                if any_left != 0:
                    failures += 1
    finally:
        free(common)
        free(bad)
    return failures
