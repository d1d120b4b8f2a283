"""Reference implementations of the hot kernels in numpy / plain Python.

These are always importable and are what runs when the compiled ``_ext``
module is missing (or disabled with ``U2U_NO_EXT=1``).
"""

import numpy as np

_CHUNK = 4096


def nearest_centroid(x, c):
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError("dimension mismatch")
    if c.shape[0] == 0:
        raise ValueError("empty codebook")
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        blk = x[start:start + _CHUNK]
        d2 = ((blk[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
        # argmin returns the first minimum, i.e. the lowest centroid index on ties
        lab = d2.argmin(axis=1)
        labels[start:start + len(blk)] = lab
        dists[start:start + len(blk)] = d2[np.arange(len(blk)), lab]
    return labels, dists


def edit_distance(a, b):
    a = list(a)
    b = list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j - 1] + (x != y), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def masked_softmax(scores, allowed):
    """Row softmax over the last axis of ``scores`` (B, H, Tq, Tk).

    ``allowed`` is (B, Tq, Tk) and is broadcast over heads. Disallowed
    entries get probability 0; rows with nothing allowed come out all zero.
    """
    allowed = np.asarray(allowed, dtype=bool)[:, None, :, :]
    neg = np.where(allowed, scores, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(mx)
    mx = np.where(empty, 0, mx)
    e = np.where(allowed, np.exp(scores - mx), 0).astype(scores.dtype)
    tot = e.sum(axis=-1, keepdims=True)
    tot = np.where(empty, 1, tot)
    return (e / tot).astype(scores.dtype)


def softmax_backward(probs, dprobs):
    dprobs = dprobs.astype(probs.dtype, copy=False)
    acc = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - acc)


def _make_crc_table():
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _make_crc_table()
_MASK = 0xFFFFFFFFFFFFFFFF


def crc64(data, crc=0):
    """CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones)."""
    table = _CRC_TABLE
    crc = ~crc & _MASK
    for byte in bytes(data):
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return ~crc & _MASK
