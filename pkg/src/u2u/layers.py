"""Forward/backward pairs for the Transformer building blocks.

Each ``*_fwd`` returns ``(output, cache)``; the matching ``*_bwd`` takes the
upstream gradient and that cache, accumulates parameter gradients into
``grads`` (a dict keyed by parameter name) and returns the input gradient.
"""

import numpy as np

from . import kernels
from .errors import ShapeMismatch

MASK_VALUE = -1e9
LN_EPS = 1e-5


def _acc(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def linear_fwd(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_bwd(dy, x, w, grads, wname, bname=None):
    _acc(grads, wname, _flat(x).T @ _flat(dy))
    if bname is not None:
        _acc(grads, bname, _flat(dy).sum(axis=0))
    return dy @ w.T


def layer_norm_fwd(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_bwd(dy, cache, grads, gname, bname):
    xhat, rstd, g = cache
    _acc(grads, gname, _flat(dy * xhat).sum(axis=0))
    _acc(grads, bname, _flat(dy).sum(axis=0))
    dxhat = dy * g
    n = xhat.shape[-1]
    s1 = dxhat.sum(axis=-1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
    return rstd * (dxhat - s1 / n - xhat * s2 / n)


def dropout_fwd(x, p, rng):
    """Inverted dropout; ``rng`` None (eval mode) or ``p == 0`` is the identity."""
    if rng is None or p <= 0:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * mask, mask


def dropout_bwd(dy, mask):
    return dy if mask is None else dy * mask


def attention(q, k, v, allowed):
    """Scaled dot-product attention on (..., T, d) matrices.

    ``allowed`` is a boolean matrix of the score shape (Tq, Tk), or a batch
    of them. Disallowed scores act as -1e9 before the softmax; a row with
    nothing allowed yields a zero output row.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"incompatible q{q.shape} k{k.shape} v{v.shape}")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ShapeMismatch(f"mask {allowed.shape} does not match scores ({q.shape[-2]}, {k.shape[-2]})")
    q4 = q.reshape((-1, 1) + q.shape[-2:])
    k4 = k.reshape((-1, 1) + k.shape[-2:])
    v4 = v.reshape((-1, 1) + v.shape[-2:])
    s = q4 @ k4.swapaxes(-1, -2) / np.sqrt(q.shape[-1])
    m = np.broadcast_to(allowed, q.shape[:-2] + allowed.shape[-2:]).reshape((-1,) + allowed.shape[-2:])
    p = kernels.masked_softmax(np.ascontiguousarray(s), m)
    return (p @ v4).reshape(q.shape[:-1] + (v.shape[-1],))


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def mha_fwd(xq, xkv, params, prefix, heads, allowed):
    """Multi-head attention block (no projection biases).

    ``allowed``: bool (B, Tq, Tk), shared by all heads.
    """
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    q = _split_heads(xq @ wq, heads)
    k = _split_heads(xkv @ wk, heads)
    v = _split_heads(xkv @ wv, heads)
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    s = (q @ k.swapaxes(-1, -2)) * scale
    p = kernels.masked_softmax(s, allowed)
    o = _merge_heads(p @ v)
    out = o @ wo
    return out, (xq, xkv, q, k, v, p, o, scale, heads)


def mha_bwd(dout, cache, params, prefix, grads):
    xq, xkv, q, k, v, p, o, scale, heads = cache
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    _acc(grads, f"{prefix}.wo", _flat(o).T @ _flat(dout))
    do = _split_heads(dout @ wo.T, heads)
    dp = do @ v.swapaxes(-1, -2)
    dv = p.swapaxes(-1, -2) @ do
    ds = kernels.softmax_backward(p, dp) * scale
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    _acc(grads, f"{prefix}.wq", _flat(xq).T @ _flat(dq))
    _acc(grads, f"{prefix}.wk", _flat(xkv).T @ _flat(dk))
    _acc(grads, f"{prefix}.wv", _flat(xkv).T @ _flat(dv))
    dxq = dq @ wq.T
    dxkv = dk @ wk.T + dv @ wv.T
    return dxq, dxkv


def ffn_fwd(x, params, prefix):
    pre = linear_fwd(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    h = np.maximum(pre, 0)
    return linear_fwd(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]), (x, h)


def ffn_bwd(dy, cache, params, prefix, grads):
    x, h = cache
    dh = linear_bwd(dy, h, params[f"{prefix}.w2"], grads, f"{prefix}.w2", f"{prefix}.b2")
    dh = dh * (h > 0)
    return linear_bwd(dh, x, params[f"{prefix}.w1"], grads, f"{prefix}.w1", f"{prefix}.b1")


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
