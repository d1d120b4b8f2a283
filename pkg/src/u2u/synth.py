"""Deterministic toy parallel "speech" corpus.

Each utterance is a string of symbols; each symbol is a 100 ms sinusoid
with 10 ms raised-cosine fades. The target string is the source string
reversed and then relabelled by a fixed permutation, rendered with a
disjoint frequency bank, so a model has to reorder globally rather than
copy frame by frame.
"""

import os
import string
from dataclasses import dataclass, field

import numpy as np

from .audio_io import SAMPLE_RATE, AudioBuffer, write_wav
from .errors import BadFractions, ConfigError
from .seqprep import ManifestRecord, ParallelManifest, save_manifest


def _geom(lo, hi, m):
    return tuple(float(round(f)) for f in np.geomspace(lo, hi, m))


@dataclass(frozen=True)
class ToySpec:
    alphabet_size: int = 8
    min_symbols: int = 3
    max_symbols: int = 12
    symbol_duration: float = 0.1
    fade: float = 0.01
    amplitude: float = 0.5
    noise: float = 0.0
    source_freqs: tuple = field(default_factory=lambda: _geom(300, 3000, 8))
    target_freqs: tuple = field(default_factory=lambda: _geom(3400, 7400, 8))
    permutation: tuple = (3, 6, 0, 5, 7, 1, 4, 2)

    def __post_init__(self):
        m = self.alphabet_size
        if not 2 <= m <= 26:
            raise ConfigError("alphabet_size must be in [2, 26]")
        if len(self.source_freqs) != m or len(self.target_freqs) != m:
            raise ConfigError("need one source and one target frequency per symbol")
        if sorted(self.permutation) != list(range(m)):
            raise ConfigError("permutation must be a permutation of range(alphabet_size)")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ConfigError("need 1 <= min_symbols <= max_symbols")
        for bank in (self.source_freqs, self.target_freqs):
            f = np.sort(np.asarray(bank))
            if np.any(np.diff(f) < 100) or f.max() >= SAMPLE_RATE / 2 or f.min() <= 0:
                raise ConfigError("frequencies must be positive, < 8000 Hz and >= 100 Hz apart")
        if max(self.source_freqs) >= min(self.target_freqs) and max(self.target_freqs) >= min(self.source_freqs):
            raise ConfigError("source and target frequency bands must be disjoint")
        if self.noise < 0 or self.amplitude <= 0 or self.amplitude + self.noise > 1:
            raise ConfigError("amplitude + noise must stay within [0, 1]")

    @property
    def symbols(self):
        return string.ascii_lowercase[:self.alphabet_size]

    @property
    def segment_samples(self):
        return int(round(self.symbol_duration * SAMPLE_RATE))

    @classmethod
    def with_alphabet(cls, m, **kw):
        perm = tuple(int(i) for i in np.random.default_rng(m).permutation(m))
        return cls(alphabet_size=m, source_freqs=_geom(300, 3000, m), target_freqs=_geom(3400, 7400, m),
                   permutation=perm, **kw)


def map_symbols(spec, symbols):
    """Target symbol indices for source indices: reverse, then permute."""
    return [spec.permutation[s] for s in reversed(list(symbols))]


def render(spec, symbols, freqs, rng=None):
    n = spec.segment_samples
    t = np.arange(n) / SAMPLE_RATE
    fade_n = int(round(spec.fade * SAMPLE_RATE))
    env = np.ones(n)
    if fade_n:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade_n) / fade_n)
        env[:fade_n] = ramp
        env[n - fade_n:] = ramp[::-1]
    segs = [spec.amplitude * env * np.sin(2 * np.pi * freqs[s] * t) for s in symbols]
    audio = np.concatenate(segs) if segs else np.zeros(0)
    if spec.noise > 0 and rng is not None:
        audio = audio + rng.uniform(-spec.noise, spec.noise, size=audio.shape)
    return AudioBuffer(np.clip(audio, -1.0, 1.0))


def sample_pair(spec, seed, index):
    """Source and target symbol indices plus their audio for pair ``index``."""
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
    src = [int(s) for s in rng.integers(0, spec.alphabet_size, size=n)]
    tgt = map_symbols(spec, src)
    return src, tgt, render(spec, src, spec.source_freqs, rng), render(spec, tgt, spec.target_freqs, rng)


def symbols_to_text(spec, symbols):
    return " ".join(spec.symbols[s] for s in symbols)


@dataclass
class ToyCorpus:
    manifest: ParallelManifest
    out_dir: str
    spec: ToySpec


def generate(spec, num_pairs, seed, out_dir):
    """Write ``num_pairs`` WAV pairs and ``manifest.jsonl`` under ``out_dir``."""
    if num_pairs < 1:
        raise ValueError("pairs must be >= 1")
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    width = max(5, len(str(num_pairs - 1)))
    records = []
    for i in range(num_pairs):
        src, tgt, src_audio, tgt_audio = sample_pair(spec, seed, i)
        rid = f"pair{i:0{width}d}"
        write_wav(src_audio, os.path.join(wav_dir, f"{rid}.src.wav"))
        write_wav(tgt_audio, os.path.join(wav_dir, f"{rid}.tgt.wav"))
        records.append(ManifestRecord(rid, f"wav/{rid}.src.wav", f"wav/{rid}.tgt.wav",
                                      symbols_to_text(spec, src), symbols_to_text(spec, tgt)))
    manifest = ParallelManifest(records, os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return ToyCorpus(manifest, out_dir, spec)


def split(manifest, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded disjoint train/dev/test partition of a manifest."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise BadFractions(f"fractions {tuple(fractions)} must be three non-negative values summing to 1")
    n = len(manifest)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(f[0] * n))
    n_dev = min(int(round(f[1] * n)), n - n_train)
    ids = [manifest.records[i].id for i in order]
    parts = (ids[:n_train], ids[n_train:n_train + n_dev], ids[n_train + n_dev:])
    # keep manifest order inside each split
    return tuple(manifest.subset(p, name) for p, name in zip(parts, ("train", "dev", "test")))


def write_splits(manifest, out_dir, fractions=(0.8, 0.1, 0.1), seed=0):
    parts = split(manifest, fractions, seed)
    for part in parts:
        save_manifest(part, os.path.join(out_dir, f"{part.split}.jsonl"))
        for side in ("source", "target"):
            with open(os.path.join(out_dir, f"{part.split}.{side}.txt"), "w", encoding="utf-8") as f:
                for r in part.records:
                    f.write((getattr(r, f"{side}_text") or "") + "\n")
    return parts


def oracle_decode(spec, audio, freqs):
    """Recover symbol indices from clean audio by per-segment dominant frequency."""
    n = spec.segment_samples
    x = audio.samples
    bank = np.asarray(freqs)
    out = []
    for start in range(0, len(x) - n + 1, n):
        seg = x[start:start + n]
        spec_mag = np.abs(np.fft.rfft(seg * np.hanning(n), n=8 * n))
        peak = np.argmax(spec_mag) * SAMPLE_RATE / (8 * n)
        out.append(int(np.argmin(np.abs(bank - peak))))
    return out
