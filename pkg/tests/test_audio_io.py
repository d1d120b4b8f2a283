import struct

import numpy as np
import pytest

from u2u.audio_io import AudioBuffer, read_wav, to_pcm16, write_wav
from u2u.errors import InvalidAudio, IoError, NotWav, UnsupportedFormat, WrongSampleRate


def wav_bytes(ints, rate=16000, channels=1, bits=16, fmt_tag=1, extra_chunk=b""):
    pcm = np.asarray(ints, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * channels * bits // 8, channels * bits // 8, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + extra_chunk + b"data" + struct.pack("<I", len(pcm)) + pcm
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_zero_second(tmp_path):
    p = tmp_path / "z.wav"
    p.write_bytes(wav_bytes(np.zeros(16000)))
    a = read_wav(p)
    assert len(a) == 16000 and a.duration == 1.0
    assert not a.samples.any()


def test_int_to_float_convention(tmp_path):
    p = tmp_path / "v.wav"
    p.write_bytes(wav_bytes([-32768, 16384, 0, 32767]))
    assert read_wav(p).samples.tolist() == [-1.0, 0.5, 0.0, 32767 / 32768]


def test_wrong_rate_names_rate(tmp_path):
    p = tmp_path / "r.wav"
    p.write_bytes(wav_bytes(np.zeros(10), rate=8000))
    with pytest.raises(WrongSampleRate, match="8000") as info:
        read_wav(p)
    assert info.value.found == 8000


def test_rejects_bad_files(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"not a wave file at all")
    with pytest.raises(NotWav):
        read_wav(p)
    p.write_bytes(wav_bytes(np.zeros(10), channels=2))
    with pytest.raises(UnsupportedFormat):
        read_wav(p)
    p.write_bytes(wav_bytes(np.zeros(10), fmt_tag=3))
    with pytest.raises(UnsupportedFormat):
        read_wav(p)


def test_unknown_chunks_skipped(tmp_path):
    p = tmp_path / "l.wav"
    p.write_bytes(wav_bytes([100, -100], extra_chunk=b"LIST" + struct.pack("<I", 3) + b"abc\x00"))
    assert read_wav(p).samples.tolist() == [100 / 32768, -100 / 32768]


def test_write_zero_and_half(tmp_path):
    p = tmp_path / "w.wav"
    write_wav(AudioBuffer(np.zeros(16000)), p)
    blob = p.read_bytes()
    assert blob[-32000:] == bytes(32000)
    assert len(read_wav(p)) == 16000
    assert to_pcm16([0.5]).tolist() == [16384]


def test_round_trip_within_quantum(tmp_path, rng):
    x = rng.uniform(-1, 1, 5000)
    p = tmp_path / "rt.wav"
    write_wav(AudioBuffer(x), p)
    y = read_wav(p).samples
    assert len(y) == len(x)
    assert np.abs(y - x).max() <= 1 / 32768


def test_buffer_invariants():
    with pytest.raises(InvalidAudio):
        AudioBuffer(np.array([0.0, 1.5]))
    with pytest.raises(InvalidAudio):
        AudioBuffer(np.zeros((2, 2)))


def test_write_error(tmp_path):
    with pytest.raises(IoError):
        write_wav(AudioBuffer(np.zeros(4)), tmp_path / "missing" / "x.wav")
