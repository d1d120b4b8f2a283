"""Unit sequences to fixed-length model tokens, parallel manifests, batching.

Token layout: PAD=0, BOS=1, EOS=2 and unit ``u`` becomes token ``u + 3``,
so cluster 0 never collides with padding. Every encoded sequence is
exactly ``seq_len`` long (300 by default) with PAD only as a suffix.
"""

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadMagic, MissingUnits, TruncatedFile, VersionUnsupported
from .quantizer import load_features

PAD, BOS, EOS = 0, 1, 2
OFFSET = 3
SEQ_LEN = 300

UNITS_MAGIC = b"U2UU"
_UNITS_HEADER = struct.Struct("<4sII")


def vocab_size(k):
    return k + OFFSET


def dedup(units):
    u = np.asarray(units, dtype=np.int64)
    if u.size == 0:
        return u
    keep = np.ones(len(u), dtype=bool)
    keep[1:] = u[1:] != u[:-1]
    return u[keep]


def encode_source(units, seq_len=SEQ_LEN):
    """Offset ids by 3, keep the first ``seq_len``, pad the rest. No BOS/EOS."""
    u = np.asarray(units, dtype=np.int64)[:seq_len]
    out = np.full(seq_len, PAD, dtype=np.int64)
    out[:len(u)] = u + OFFSET
    return out


def encode_target(units, seq_len=SEQ_LEN):
    """Teacher-forcing pair: (BOS + units, units + EOS), both padded to ``seq_len``."""
    u = np.asarray(units, dtype=np.int64)[:seq_len - 2] + OFFSET
    core = np.concatenate([[BOS], u, [EOS]])
    dec_in = np.full(seq_len, PAD, dtype=np.int64)
    dec_out = np.full(seq_len, PAD, dtype=np.int64)
    dec_in[:len(core) - 1] = core[:-1]
    dec_out[:len(core) - 1] = core[1:]
    return dec_in, dec_out


def decode_tokens(tokens):
    """Units up to the first EOS; PAD and BOS are dropped."""
    out = []
    for t in np.asarray(tokens, dtype=np.int64).reshape(-1):
        if t == EOS:
            break
        if t >= OFFSET:
            out.append(int(t) - OFFSET)
    return np.asarray(out, dtype=np.int64)


# -- unit cache files -----------------------------------------------------

def write_units(units, path):
    u = np.asarray(units, dtype=np.int64)
    if u.size and (u.min() < 0 or u.max() > 0xFFFF):
        raise ValueError("unit ids must fit in u16")
    with open(path, "wb") as f:
        f.write(_UNITS_HEADER.pack(UNITS_MAGIC, 1, len(u)) + u.astype("<u2").tobytes())


def read_units(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != UNITS_MAGIC:
        raise BadMagic(f"{path}: not a unit file")
    if len(blob) < _UNITS_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, count = _UNITS_HEADER.unpack_from(blob)
    if version != 1:
        raise VersionUnsupported(f"{path}: unit file version {version}")
    body = blob[_UNITS_HEADER.size:]
    if len(body) < 2 * count:
        raise TruncatedFile(f"{path}: {count} units claimed, {len(body) // 2} present")
    return np.frombuffer(body[:2 * count], dtype="<u2").astype(np.int64)


def is_unit_file(path):
    try:
        with open(path, "rb") as f:
            return f.read(4) == UNITS_MAGIC
    except OSError:
        return False


# -- manifests ------------------------------------------------------------

_CORE_KEYS = ("id", "source", "target", "source_text", "target_text")


@dataclass
class ManifestRecord:
    id: str
    source: str
    target: str
    source_text: str = None
    target_text: str = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = {"id": self.id, "source": self.source, "target": self.target}
        if self.source_text is not None:
            d["source_text"] = self.source_text
        if self.target_text is not None:
            d["target_text"] = self.target_text
        d.update(self.extra)
        return d


class ParallelManifest:
    """Records of a split plus a lazily filled cache of their unit sequences.

    Unit sequences come from, in order: the in-memory cache, the
    ``source_units`` / ``target_units`` pointer of the record, or the
    ``source`` / ``target`` path itself when it points at a unit file.
    """

    def __init__(self, records, base_dir=".", split=None):
        self.records = list(records)
        self.base_dir = os.fspath(base_dir)
        self.split = split
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        self._units = {}
        self._features = {}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def relative(self, path):
        return os.path.relpath(path, self.base_dir)

    def set_units(self, rec_id, side, units):
        self._units[(rec_id, side)] = np.asarray(units, dtype=np.int64)

    def units(self, rec, side):
        key = (rec.id, side)
        if key not in self._units:
            ptr = rec.extra.get(f"{side}_units")
            if ptr is None:
                direct = getattr(rec, side)
                if direct and is_unit_file(self.resolve(direct)):
                    ptr = direct
            if ptr is None:
                raise MissingUnits(f"record {rec.id!r} has no cached {side} units")
            self._units[key] = read_units(self.resolve(ptr))
        return self._units[key]

    def features(self, rec, side="source"):
        key = (rec.id, side)
        if key not in self._features:
            ptr = rec.extra.get(f"{side}_features")
            if ptr is None:
                raise MissingUnits(f"record {rec.id!r} has no cached {side} features")
            self._features[key] = load_features(self.resolve(ptr))
        return self._features[key]

    def subset(self, ids, split=None):
        keep = set(ids)
        out = ParallelManifest([r for r in self.records if r.id in keep], self.base_dir, split)
        out._units = {k: v for k, v in self._units.items() if k[0] in keep}
        out._features = {k: v for k, v in self._features.items() if k[0] in keep}
        return out


def load_manifest(path, split=None, check_files=True):
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            missing = [k for k in ("id", "source", "target") if k not in d]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing keys {missing}")
            extra = {k: v for k, v in d.items() if k not in _CORE_KEYS}
            records.append(ManifestRecord(str(d["id"]), d["source"], d["target"], d.get("source_text"),
                                          d.get("target_text"), extra))
    m = ParallelManifest(records, base, split)
    if check_files:
        for r in records:
            for key in ("source", "target"):
                p = m.resolve(getattr(r, key))
                if not os.path.exists(p):
                    raise FileNotFoundError(f"{path}: record {r.id!r} {key} file {p} not found")
    return m


def save_manifest(manifest, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    os.replace(tmp, path)


# -- batching -------------------------------------------------------------

@dataclass
class Batch:
    encoder_tokens: np.ndarray
    decoder_input: np.ndarray
    decoder_target: np.ndarray
    ids: list = field(default_factory=list)
    encoder_features: np.ndarray = None
    feature_frames: np.ndarray = None

    @property
    def size(self):
        return self.decoder_input.shape[0]

    @property
    def encoder_pad(self):
        return self.encoder_tokens == PAD

    @property
    def decoder_input_pad(self):
        return self.decoder_input == PAD

    @property
    def decoder_target_pad(self):
        return self.decoder_target == PAD

    def trimmed(self):
        """Drop trailing columns that are PAD in every row.

        Outputs at non-PAD positions are unaffected, since PAD keys are
        masked everywhere and causality hides later decoder positions.
        """
        def width(tok):
            valid = tok != PAD
            if not valid.any():
                return 1
            return int(np.flatnonzero(valid.any(axis=0)).max()) + 1

        dw = max(width(self.decoder_input), width(self.decoder_target))
        kw = {}
        if self.encoder_tokens is not None and self.encoder_features is None:
            kw["encoder_tokens"] = self.encoder_tokens[:, :width(self.encoder_tokens)]
        return replace(self, decoder_input=self.decoder_input[:, :dw], decoder_target=self.decoder_target[:, :dw],
                       **kw)


def encode_pairs(manifest, seq_len=SEQ_LEN, use_dedup=False):
    """Stack encoder/decoder token arrays for every record, in manifest order."""
    n = len(manifest)
    enc = np.zeros((n, seq_len), dtype=np.int64)
    dec_in = np.zeros((n, seq_len), dtype=np.int64)
    dec_out = np.zeros((n, seq_len), dtype=np.int64)
    for i, rec in enumerate(manifest.records):
        src = manifest.units(rec, "source")
        tgt = manifest.units(rec, "target")
        if use_dedup:
            src, tgt = dedup(src), dedup(tgt)
        enc[i] = encode_source(src, seq_len)
        dec_in[i], dec_out[i] = encode_target(tgt, seq_len)
    return enc, dec_in, dec_out


def batch_order(n, batch_size, seed=0, shuffle=True):
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(manifest, batch_size=25, seed=0, shuffle=True, seq_len=SEQ_LEN, use_dedup=False,
                 with_features=False, encoded=None):
    """Deterministic batches for a manifest; the last one may be short.

    ``encoded`` may carry the output of :func:`encode_pairs` to avoid
    re-encoding every epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    enc, dec_in, dec_out = encoded if encoded is not None else encode_pairs(manifest, seq_len, use_dedup)
    batches = []
    for idx in batch_order(len(manifest), batch_size, seed, shuffle):
        b = Batch(enc[idx], dec_in[idx], dec_out[idx], [manifest.records[i].id for i in idx])
        if with_features:
            feats = [manifest.features(manifest.records[i]).data for i in idx]
            b.encoder_features, b.feature_frames = pad_features(feats)
        batches.append(b)
    return batches


def pad_features(mats):
    frames = np.array([m.shape[0] for m in mats], dtype=np.int64)
    dim = mats[0].shape[1]
    out = np.zeros((len(mats), max(1, int(frames.max())), dim), dtype=np.float32)
    for i, m in enumerate(mats):
        out[i, :len(m)] = m
    return out, frames
