"""Encoder-decoder Transformer over unit tokens, in numpy, with exact backprop.

Layout follows the original post-norm Transformer: every sublayer is
``LayerNorm(x + Dropout(Sublayer(x)))`` with a ReLU feed-forward block.
The encoder either embeds discrete tokens (unit-to-unit) or projects
stacked continuous feature frames (speech-to-unit baseline).

Parameters live in a flat dict of named arrays; gradients use the same
names. ``forward`` keeps whatever ``backward`` needs in a ``Cache``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, DimMismatch, MissingCache, OddDim, ShapeMismatch
from .seqprep import PAD, SEQ_LEN


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    heads: int = 1
    enc_layers: int = 3
    dec_layers: int = 3
    ffn_dim: int = 2048
    dropout: float = 0.1
    vocab: int = 103
    max_len: int = SEQ_LEN
    frontend: str = "discrete"
    feature_dim: int = 80
    stack_factor: int = 4

    def __post_init__(self):
        for name in ("d_model", "heads", "enc_layers", "dec_layers", "ffn_dim", "vocab", "max_len",
                     "feature_dim", "stack_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.frontend not in ("discrete", "continuous"):
            raise ConfigError(f"unknown frontend {self.frontend!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(cfg):
    """Ordered ``name -> shape``; the order fixes the RNG draw sequence."""
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab
    shapes = {}
    if cfg.frontend == "discrete":
        shapes["src_embed"] = (v, d)
    else:
        shapes["src_proj"] = (cfg.feature_dim * cfg.stack_factor, d)
    shapes["tgt_embed"] = (v, d)

    def attn(prefix):
        for n in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{n}"] = (d, d)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.enc_layers):
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.ln1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.ln2")
    for i in range(cfg.dec_layers):
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ffn")
        norm(f"dec.{i}.ln3")
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


def init_params(cfg, seed=0, dtype=np.float32):
    """Xavier-uniform matrices, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            w = rng.uniform(-a, a, size=shape)
        elif name.endswith(".g"):
            w = np.ones(shape)
        else:
            w = np.zeros(shape)
        params[name] = w.astype(dtype)
    return params


def positional_encoding(T, d, dtype=np.float64):
    if d % 2:
        raise OddDim(f"model dimension {d} is odd")
    pos = np.arange(T, dtype=np.float64)[:, None]
    div = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe.astype(dtype)


_PE_CACHE = {}


def _pe(T, d, dtype):
    key = (d, np.dtype(dtype).str)
    pe = _PE_CACHE.get(key)
    if pe is None or pe.shape[0] < T:
        pe = positional_encoding(max(T, SEQ_LEN), d, dtype)
        _PE_CACHE[key] = pe
    return pe[:T]


def attention(q, k, v, mask):
    """softmax(q k^T / sqrt(d_k)) v with a boolean ``mask`` of allowed positions."""
    return L.attention(q, k, v, mask)


def stack_frames(features, frames, stack_factor, positions):
    """Concatenate ``stack_factor`` consecutive frames per encoder position.

    Returns ``(stacked (B, positions, D*s), valid (B, positions))`` where a
    position is valid iff all of its frames are real (``p < frames // s``).
    """
    feats = np.asarray(features)
    b, f, dim = feats.shape
    s = stack_factor
    usable = f // s
    stacked = feats[:, :usable * s].reshape(b, usable, s * dim)
    out = np.zeros((b, positions, s * dim), dtype=feats.dtype)
    n = min(usable, positions)
    out[:, :n] = stacked[:, :n]
    valid = np.arange(positions)[None, :] < np.minimum(np.asarray(frames) // s, positions)[:, None]
    return out, valid


def continuous_frontend(features, frames, params, cfg, positions=None):
    """Encoder input states for feature input: stacked projection plus positions.

    ``features`` (B, F, feature_dim) and true per-row frame counts.
    """
    feats = np.asarray(features)
    if feats.ndim != 3 or feats.shape[2] != cfg.feature_dim:
        raise DimMismatch(f"features {feats.shape} do not match feature_dim {cfg.feature_dim}")
    positions = cfg.max_len if positions is None else positions
    stacked, valid = stack_frames(feats.astype(params["src_proj"].dtype), frames, cfg.stack_factor, positions)
    x = stacked @ params["src_proj"] + _pe(positions, cfg.d_model, params["src_proj"].dtype)
    return x, valid, stacked


class Cache:
    """Activations saved by ``forward`` for ``backward``."""

    def __init__(self):
        self.enc = []
        self.dec = []


def _rng(mode, seed):
    if mode == "train":
        return np.random.default_rng(seed)
    if mode == "eval":
        return None
    raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")


def _encoder_input(params, cfg, batch, positions=None):
    """Returns (states, valid mask, backward info)."""
    dtype = params["tgt_embed"].dtype
    if cfg.frontend == "discrete":
        tok = np.asarray(batch.encoder_tokens)
        if tok.ndim != 2 or tok.shape[1] > cfg.max_len:
            raise ShapeMismatch(f"encoder tokens {tok.shape} exceed max_len {cfg.max_len}")
        scale = dtype.type(math.sqrt(cfg.d_model))
        x = params["src_embed"][tok] * scale + _pe(tok.shape[1], cfg.d_model, dtype)
        return x, tok != PAD, ("discrete", tok, scale)
    if batch.encoder_features is None:
        raise ShapeMismatch("continuous frontend needs encoder_features in the batch")
    x, valid, stacked = continuous_frontend(batch.encoder_features, batch.feature_frames, params, cfg, positions)
    return x, valid, ("continuous", stacked)


def compact_positions(batch, cfg):
    """Smallest encoder length that keeps every valid position of the batch."""
    if cfg.frontend == "discrete":
        return None
    n = np.minimum(np.asarray(batch.feature_frames) // cfg.stack_factor, cfg.max_len)
    return max(1, int(n.max()))


def encode(params, cfg, batch, mode="eval", rng=None, cache=None, positions=None):
    x, src_valid, info = _encoder_input(params, cfg, batch, positions)
    if cache is not None:
        cache.src_info = info
    x, m = L.dropout_fwd(x, cfg.dropout, rng)
    if cache is not None:
        cache.enc_in_mask = m
    b, s = src_valid.shape
    allowed = np.broadcast_to(src_valid[:, None, :], (b, s, s))
    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        a, ca = L.mha_fwd(x, x, params, f"{p}.self", cfg.heads, allowed)
        a, ma = L.dropout_fwd(a, cfg.dropout, rng)
        x1, cn1 = L.layer_norm_fwd(x + a, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        f, cf = L.ffn_fwd(x1, params, f"{p}.ffn")
        f, mf = L.dropout_fwd(f, cfg.dropout, rng)
        x, cn2 = L.layer_norm_fwd(x1 + f, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        if cache is not None:
            cache.enc.append((ca, ma, cn1, cf, mf, cn2))
    return x, src_valid


def decoder_masks(dec_in, src_valid):
    dec_valid = dec_in != PAD
    b, t = dec_in.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    self_allowed = causal[None, :, :] & dec_valid[:, None, :]
    cross_allowed = np.broadcast_to(src_valid[:, None, :], (b, t, src_valid.shape[1]))
    return self_allowed, cross_allowed


def decode(params, cfg, dec_in, memory, src_valid, rng=None, cache=None):
    dtype = params["tgt_embed"].dtype
    dec_in = np.asarray(dec_in)
    if dec_in.ndim != 2 or dec_in.shape[1] > cfg.max_len:
        raise ShapeMismatch(f"decoder input {dec_in.shape} exceeds max_len {cfg.max_len}")
    if dec_in.shape[0] != memory.shape[0]:
        raise ShapeMismatch("encoder and decoder batch sizes differ")
    scale = dtype.type(math.sqrt(cfg.d_model))
    y = params["tgt_embed"][dec_in] * scale + _pe(dec_in.shape[1], cfg.d_model, dtype)
    y, m = L.dropout_fwd(y, cfg.dropout, rng)
    if cache is not None:
        cache.dec_tokens, cache.dec_scale, cache.dec_in_mask = dec_in, scale, m
    self_allowed, cross_allowed = decoder_masks(dec_in, src_valid)
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        a, ca = L.mha_fwd(y, y, params, f"{p}.self", cfg.heads, self_allowed)
        a, ma = L.dropout_fwd(a, cfg.dropout, rng)
        y1, cn1 = L.layer_norm_fwd(y + a, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        c, cc = L.mha_fwd(y1, memory, params, f"{p}.cross", cfg.heads, cross_allowed)
        c, mc = L.dropout_fwd(c, cfg.dropout, rng)
        y2, cn2 = L.layer_norm_fwd(y1 + c, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        f, cf = L.ffn_fwd(y2, params, f"{p}.ffn")
        f, mf = L.dropout_fwd(f, cfg.dropout, rng)
        y, cn3 = L.layer_norm_fwd(y2 + f, params[f"{p}.ln3.g"], params[f"{p}.ln3.b"])
        if cache is not None:
            cache.dec.append((ca, ma, cn1, cc, mc, cn2, cf, mf, cn3))
    logits = L.linear_fwd(y, params["out.w"], params["out.b"])
    if cache is not None:
        cache.final = y
    return logits


def forward(params, cfg, batch, mode="eval", seed=0, keep_cache=True, compact=False):
    """Logits (B, T, vocab) for a batch under teacher forcing.

    ``mode="train"`` enables dropout with masks drawn from
    ``np.random.default_rng(seed)``; ``"eval"`` is deterministic. With
    ``compact`` the all-PAD tail columns are dropped first, which leaves
    every non-PAD output position unchanged.
    """
    rng = _rng(mode, seed)
    positions = None
    if compact:
        batch = batch.trimmed()
        positions = compact_positions(batch, cfg)
    cache = Cache() if keep_cache else None
    memory, src_valid = encode(params, cfg, batch, mode, rng, cache, positions)
    logits = decode(params, cfg, batch.decoder_input, memory, src_valid, rng, cache)
    if cache is not None:
        cache.memory = memory
        cache.batch = batch
    return logits, cache


def loss(logits, target, pad_mask=None):
    """Mean token cross-entropy (natural log) over non-PAD target positions."""
    target = np.asarray(target)
    t = target.shape[-1]
    logits = logits[..., :t, :]
    valid = target != PAD if pad_mask is None else ~np.asarray(pad_mask)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no non-PAD target positions")
    lp = L.log_softmax(logits.astype(np.float64))
    picked = np.take_along_axis(lp, target[..., None], axis=-1)[..., 0]
    return float(-(picked * valid).sum() / n)


def loss_grad(logits, target, pad_mask=None, seed=1.0):
    """d(loss)/d(logits), scaled by ``seed``."""
    target = np.asarray(target)
    valid = target != PAD if pad_mask is None else ~np.asarray(pad_mask)
    n = int(valid.sum())
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    np.put_along_axis(p, target[..., None], np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
    p *= (valid[..., None] * (seed / n))
    return p.astype(logits.dtype)


def backward(params, cfg, cache, dlogits):
    """Exact gradients of the loss whose logits-gradient is ``dlogits``."""
    if cache is None or not hasattr(cache, "final"):
        raise MissingCache("backward needs the cache of a forward pass run with keep_cache=True")
    grads = {name: np.zeros_like(w) for name, w in params.items()}
    dy = L.linear_bwd(dlogits, cache.final, params["out.w"], grads, "out.w", "out.b")
    dmem = np.zeros_like(cache.memory)
    for i in reversed(range(cfg.dec_layers)):
        p = f"dec.{i}"
        ca, ma, cn1, cc, mc, cn2, cf, mf, cn3 = cache.dec[i]
        d = L.layer_norm_bwd(dy, cn3, grads, f"{p}.ln3.g", f"{p}.ln3.b")
        dy2 = d + L.ffn_bwd(L.dropout_bwd(d, mf), cf, params, f"{p}.ffn", grads)
        d = L.layer_norm_bwd(dy2, cn2, grads, f"{p}.ln2.g", f"{p}.ln2.b")
        dq, dkv = L.mha_bwd(L.dropout_bwd(d, mc), cc, params, f"{p}.cross", grads)
        dmem += dkv
        dy1 = d + dq
        d = L.layer_norm_bwd(dy1, cn1, grads, f"{p}.ln1.g", f"{p}.ln1.b")
        dq, dkv = L.mha_bwd(L.dropout_bwd(d, ma), ca, params, f"{p}.self", grads)
        dy = d + dq + dkv
    dy = L.dropout_bwd(dy, cache.dec_in_mask)
    np.add.at(grads["tgt_embed"], cache.dec_tokens, dy * cache.dec_scale)

    dx = dmem
    for i in reversed(range(cfg.enc_layers)):
        p = f"enc.{i}"
        ca, ma, cn1, cf, mf, cn2 = cache.enc[i]
        d = L.layer_norm_bwd(dx, cn2, grads, f"{p}.ln2.g", f"{p}.ln2.b")
        dx1 = d + L.ffn_bwd(L.dropout_bwd(d, mf), cf, params, f"{p}.ffn", grads)
        d = L.layer_norm_bwd(dx1, cn1, grads, f"{p}.ln1.g", f"{p}.ln1.b")
        dq, dkv = L.mha_bwd(L.dropout_bwd(d, ma), ca, params, f"{p}.self", grads)
        dx = d + dq + dkv
    dx = L.dropout_bwd(dx, cache.enc_in_mask)
    info = cache.src_info
    if info[0] == "discrete":
        _, tok, scale = info
        np.add.at(grads["src_embed"], tok, dx * scale)
    else:
        stacked = info[1]
        grads["src_proj"] += stacked.reshape(-1, stacked.shape[-1]).T @ dx.reshape(-1, dx.shape[-1])
    return grads


def loss_and_grads(params, cfg, batch, mode="train", seed=0, compact=True):
    logits, cache = forward(params, cfg, batch, mode, seed, keep_cache=True, compact=compact)
    target = cache.batch.decoder_target
    value = loss(logits, target)
    grads = backward(params, cfg, cache, loss_grad(logits, target))
    return value, grads


def num_params(params):
    return int(sum(w.size for w in params.values()))
