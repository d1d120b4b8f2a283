"""Frame-level acoustic features: MFCC and log-mel energies.

Framing is 25 ms Hamming windows every 20 ms (50 frames/s), zero-padded
to a 512-point real FFT. Both feature kinds share the same framing, so a
given waveform always yields the same number of frames.
"""

import enum
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .audio_io import SAMPLE_RATE, AudioBuffer
from .errors import ConfigError, DegenerateFilter

LOG_FLOOR = 1e-10


class FeatureKind(enum.IntEnum):
    MFCC = 0
    LOGMEL = 1
    IMPORTED = 2

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown feature kind {value!r}") from None
        return cls(int(value))


@dataclass(frozen=True)
class FeatureConfig:
    window_ms: float = 25.0
    hop_ms: float = 20.0
    fft_size: int = 512
    num_mel_filters: int = 26
    num_ceps: int = 13
    preemphasis: float = 0.97
    fmin: float = 0.0
    fmax: float = 8000.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.window_samples < 1 or self.hop_samples < 1:
            raise ConfigError("window and hop must cover at least one sample")
        if self.fft_size < self.window_samples:
            raise ConfigError(f"fft_size {self.fft_size} < window of {self.window_samples} samples")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate/2")
        if not 1 <= self.num_ceps <= self.num_mel_filters:
            raise ConfigError("need 1 <= num_ceps <= num_mel_filters")
        if not 0 <= self.preemphasis < 1:
            raise ConfigError("preemphasis must be in [0, 1)")

    @property
    def window_samples(self):
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_samples(self):
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def frame_rate(self):
        return 1000.0 / self.hop_ms

    def for_logmel(self, num_mel_filters=80):
        return FeatureConfig(**{**self.__dict__, "num_mel_filters": num_mel_filters,
                                "num_ceps": min(self.num_ceps, num_mel_filters)})


LOGMEL_CONFIG = FeatureConfig(num_mel_filters=80)


@dataclass
class FeatureMatrix:
    data: np.ndarray
    kind: FeatureKind = FeatureKind.MFCC
    frame_rate: float = 50.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        if self.data.ndim != 2:
            raise ValueError("feature matrix must be 2-D (frames x dims)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains NaN or Inf")
        self.kind = FeatureKind.parse(self.kind)

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]


def num_frames(num_samples, window, hop):
    if num_samples < window:
        return 0
    return (num_samples - window) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def preemphasize(audio, alpha=0.97):
    if not 0 <= alpha < 1:
        raise ValueError("alpha must be in [0, 1)")
    x = audio.samples
    y = x.copy()
    y[1:] = x[1:] - alpha * x[:-1]
    # may exceed [-1, 1] slightly, so bypass the AudioBuffer range check
    out = AudioBuffer.__new__(AudioBuffer)
    object.__setattr__(out, "samples", y)
    object.__setattr__(out, "sample_rate", audio.sample_rate)
    return out


def frame_signal(x, window, hop):
    n = num_frames(len(x), window, hop)
    if n == 0:
        return np.zeros((0, window))
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft_power(audio, cfg=FeatureConfig()):
    """|rfft|^2 of Hamming-windowed frames, shape (frames, fft_size/2 + 1)."""
    x = np.asarray(audio.samples, dtype=np.float64)
    frames = frame_signal(x, cfg.window_samples, cfg.hop_samples)
    frames = frames * np.hamming(cfg.window_samples)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_filterbank(cfg=FeatureConfig(), num_filters=None):
    """Triangular filters with peaks equally spaced on the mel scale.

    Weights are evaluated at the FFT bin centre frequencies, so a filter is
    degenerate only if no bin centre falls strictly inside its support.
    """
    n = cfg.num_mel_filters if num_filters is None else num_filters
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), n + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise DegenerateFilter(
            f"mel filter(s) {empty.tolist()} cover no FFT bin; increase fft_size or reduce num_mel_filters")
    return fb


def _log_mel_energies(audio, cfg):
    power = stft_power(preemphasize(audio, cfg.preemphasis), cfg)
    energies = power @ mel_filterbank(cfg).T
    return np.log(energies + LOG_FLOOR)


def mfcc(audio, cfg=FeatureConfig()):
    logmel = _log_mel_energies(audio, cfg)
    if logmel.shape[0] == 0:
        ceps = np.zeros((0, cfg.num_ceps))
    else:
        ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.num_ceps]
    return FeatureMatrix(ceps, FeatureKind.MFCC, cfg.frame_rate)


def log_mel(audio, cfg=LOGMEL_CONFIG):
    return FeatureMatrix(_log_mel_energies(audio, cfg), FeatureKind.LOGMEL, cfg.frame_rate)


def extract(audio, kind, cfg=None):
    kind = FeatureKind.parse(kind)
    if kind == FeatureKind.MFCC:
        return mfcc(audio, cfg or FeatureConfig())
    if kind == FeatureKind.LOGMEL:
        return log_mel(audio, cfg or LOGMEL_CONFIG)
    raise ValueError("imported features cannot be computed locally")
