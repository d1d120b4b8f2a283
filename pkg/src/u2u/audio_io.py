"""PCM16 mono WAV reading and writing at the pipeline's fixed 16 kHz rate."""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidAudio, IoError, NotWav, UnsupportedFormat, WrongSampleRate

SAMPLE_RATE = 16000
_SCALE = 32768.0


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise InvalidAudio("audio must be mono (1-D)")
        if s.size and (not np.all(np.isfinite(s)) or np.abs(s).max() > 1.0):
            raise InvalidAudio("samples must be finite and within [-1, 1]")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path):
    """Load a RIFF/WAVE PCM16 mono 16 kHz file; unknown chunks are skipped."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotWav(f"{path}: not a RIFF/WAVE file")
    fmt = pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise UnsupportedFormat(f"{path}: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data" and pcm is None:
            pcm = body
    if fmt is None or pcm is None:
        raise NotWav(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1 or bits != 16 or channels != 1:
        raise UnsupportedFormat(f"{path}: need PCM 16-bit mono, got format={tag} bits={bits} channels={channels}")
    if rate != SAMPLE_RATE:
        raise WrongSampleRate(rate)
    ints = np.frombuffer(pcm[: len(pcm) // 2 * 2], dtype="<i2")
    return AudioBuffer(ints.astype(np.float64) / _SCALE, rate)


def to_pcm16(samples):
    ints = np.round(np.asarray(samples, dtype=np.float64) * _SCALE)
    return np.clip(ints, -32768, 32767).astype("<i2")


def write_wav(buffer, path):
    pcm = to_pcm16(buffer.samples).tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, buffer.sample_rate, buffer.sample_rate * 2, 2, 16)
    try:
        with open(path, "wb") as f:
            f.write(header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm)
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc}") from exc
