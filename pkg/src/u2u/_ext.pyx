# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. ``u2u.kernels`` picks these up when the build succeeded."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

ctypedef fused real_t:
    float
    double


def nearest_centroid(const double[:, ::1] x, const double[:, ::1] c):
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double best, acc, diff
    cdef int64_t arg
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    cdef int64_t[::1] lab = labels
    cdef double[::1] dist = dists
    if c.shape[1] != d:
        raise ValueError("dimension mismatch")
    if k == 0:
        raise ValueError("empty codebook")
    with nogil:
        for i in range(n):
            best = 0.0
            arg = -1
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - c[j, t]
                    acc = acc + diff * diff
                if arg < 0 or acc < best:
                    best = acc
                    arg = j
            lab[i] = arg
            dist[i] = best
    return labels, dists


def edit_distance(const int64_t[::1] a, const int64_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef int64_t sub, ins, dele, best
    if n == 0:
        return m
    if m == 0:
        return n
    prev_arr = np.arange(m + 1, dtype=np.int64)
    cur_arr = np.empty(m + 1, dtype=np.int64)
    cdef int64_t[::1] prev = prev_arr
    cdef int64_t[::1] cur = cur_arr
    cdef int64_t[::1] tmp
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def _softmax_rows(real_t[:, :, :, ::1] s, const unsigned char[:, :, ::1] allowed,
                  real_t[:, :, :, ::1] out):
    cdef Py_ssize_t B = s.shape[0], H = s.shape[1], Tq = s.shape[2], Tk = s.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef double mx, tot, e
    cdef int seen
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(Tq):
                    seen = 0
                    mx = 0.0
                    for j in range(Tk):
                        if allowed[b, i, j]:
                            if not seen or s[b, h, i, j] > mx:
                                mx = s[b, h, i, j]
                            seen = 1
                    if not seen:
                        for j in range(Tk):
                            out[b, h, i, j] = 0
                        continue
                    tot = 0.0
                    for j in range(Tk):
                        if allowed[b, i, j]:
                            e = exp(s[b, h, i, j] - mx)
                            out[b, h, i, j] = <real_t>e
                            tot = tot + e
                        else:
                            out[b, h, i, j] = 0
                    for j in range(Tk):
                        out[b, h, i, j] = <real_t>(out[b, h, i, j] / tot)


def masked_softmax(scores, allowed):
    scores = np.ascontiguousarray(scores)
    allowed = np.ascontiguousarray(allowed, dtype=np.uint8)
    out = np.empty_like(scores)
    if scores.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {scores.dtype}")
    _softmax_rows(scores, allowed, out)
    return out


def _softmax_grad_rows(real_t[:, ::1] p, real_t[:, ::1] dp, real_t[:, ::1] out):
    cdef Py_ssize_t n = p.shape[0], m = p.shape[1], i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                acc = acc + p[i, j] * dp[i, j]
            for j in range(m):
                out[i, j] = <real_t>(p[i, j] * (dp[i, j] - acc))


def softmax_backward(probs, dprobs):
    shape = probs.shape
    last = shape[len(shape) - 1]
    p = np.ascontiguousarray(probs).reshape(-1, last)
    dp = np.ascontiguousarray(dprobs, dtype=probs.dtype).reshape(-1, last)
    out = np.empty_like(p)
    if p.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {p.dtype}")
    _softmax_grad_rows(p, dp, out)
    return out.reshape(shape)


cdef uint64_t _CRC_TABLE[256]
cdef bint _crc_ready = False


cdef void _crc_init():
    global _crc_ready
    cdef uint64_t poly = 0xC96C5795D7870F42ULL
    cdef uint64_t crc
    cdef int i, bit
    for i in range(256):
        crc = i
        for bit in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ poly
            else:
                crc = crc >> 1
        _CRC_TABLE[i] = crc
    _crc_ready = True


def crc64(const unsigned char[::1] data, uint64_t crc=0):
    cdef Py_ssize_t i, n = data.shape[0]
    if not _crc_ready:
        _crc_init()
    crc = ~crc
    with nogil:
        for i in range(n):
            crc = _CRC_TABLE[(crc ^ data[i]) & 0xFF] ^ (crc >> 8)
    return ~crc
