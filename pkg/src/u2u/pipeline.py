"""Glue between audio, features, codebooks and unit caches.

``extract_units`` is what the ``extract-units`` command runs: it turns
one side of a manifest into unit files and points the manifest at them,
so training never has to touch audio.
"""

import os

import numpy as np

from .audio_io import SAMPLE_RATE, AudioBuffer, read_wav
from .features import FeatureConfig, FeatureKind, LOGMEL_CONFIG, extract, mel_filterbank
from .quantizer import (export_features, invert, load_codebook, quantize, save_codebook,
                        train_codebook)
from .seqprep import load_manifest, save_manifest, write_units

SIDES = ("source", "target")


def side_features(manifest, side, kind=FeatureKind.MFCC, cfg=None):
    """Feature matrices for one side, in manifest order."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    return [extract(read_wav(manifest.resolve(getattr(r, side))), kind, cfg) for r in manifest.records]


def fit_codebook(mats, k=100, seed=0, max_frames=None, max_iter=100):
    """Train a codebook on the pooled frames, optionally on a seeded subsample."""
    x = np.concatenate([m.data for m in mats], axis=0)
    if max_frames is not None and x.shape[0] > max_frames:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], max_frames, replace=False))
        x = x[idx]
    return train_codebook(x, k=k, seed=seed, max_iter=max_iter, feature_kind=mats[0].kind)


def extract_units(manifest_path, side, codebook_path, k=100, seed=0, feature_cfg=None, max_frames=None,
                  unit_dir=None, save_features=False, log=None):
    """Featurize, (train the codebook if the file is absent,) quantize and cache one side.

    Unit files go to ``<manifest dir>/units/<side>/<id>.u2uu`` unless
    ``unit_dir`` says otherwise; the manifest is rewritten in place with
    ``<side>_units`` pointers. Returns ``(manifest, codebook)``.
    """
    manifest = load_manifest(manifest_path)
    cfg = feature_cfg or FeatureConfig()
    mats = side_features(manifest, side, FeatureKind.MFCC, cfg)
    if os.path.exists(codebook_path):
        cb = load_codebook(codebook_path)
    else:
        cb = fit_codebook(mats, k, seed, max_frames)
        save_codebook(cb, codebook_path)
        # quantize with the stored f32 centroids so a rerun reproduces the same units
        cb = load_codebook(codebook_path)
        if log is not None:
            log(f"trained {side} codebook k={cb.k}, objective {cb.objective:.4f}")
    unit_dir = unit_dir or os.path.join(manifest.base_dir, "units", side)
    os.makedirs(unit_dir, exist_ok=True)
    for rec, fm in zip(manifest.records, mats):
        units = quantize(fm, cb)
        path = os.path.join(unit_dir, f"{rec.id}.u2uu")
        write_units(units, path)
        rec.extra[f"{side}_units"] = manifest.relative(path)
        manifest.set_units(rec.id, side, units)
    if save_features:
        feat_dir = os.path.join(manifest.base_dir, "features", side)
        os.makedirs(feat_dir, exist_ok=True)
        for rec in manifest.records:
            fm = extract(read_wav(manifest.resolve(getattr(rec, side))), FeatureKind.LOGMEL,
                         cfg.for_logmel(LOGMEL_CONFIG.num_mel_filters))
            path = os.path.join(feat_dir, f"{rec.id}.u2uf")
            export_features(fm, path)
            rec.extra[f"{side}_features"] = manifest.relative(path)
    save_manifest(manifest, manifest_path)
    return manifest, cb


def attach_units(manifest, side, cb, mats):
    """In-memory variant: quantize ``mats`` and cache the units on ``manifest``."""
    for rec, fm in zip(manifest.records, mats):
        manifest.set_units(rec.id, side, quantize(fm, cb))
    return manifest


def attach_features(manifest, side, mats):
    for rec, fm in zip(manifest.records, mats):
        manifest._features[(rec.id, side)] = fm
    return manifest


# -- centroid inversion ---------------------------------------------------

def units_to_audio(units, cb, cfg=None, seed=0):
    """Rough waveform from MFCC centroids, for listening checks only.

    Inverse DCT recovers log mel energies, a pseudo-inverse of the
    filterbank spreads them over FFT bins, and random-phase overlap-add
    followed by de-emphasis produces audio. This is not a vocoder.
    """
    from scipy.fft import idct
    cfg = cfg or FeatureConfig()
    if cb.feature_kind != FeatureKind.MFCC or cb.dim != cfg.num_ceps:
        raise ValueError("centroid inversion needs an MFCC codebook matching the feature config")
    ceps = invert(units, cb).data
    n = ceps.shape[0]
    full = np.zeros((n, cfg.num_mel_filters))
    full[:, :cfg.num_ceps] = ceps
    logmel = idct(full, type=2, norm="ortho", axis=1)
    mel = np.exp(logmel)
    fb = mel_filterbank(cfg)
    power = np.maximum(mel @ np.linalg.pinv(fb).T, 0.0)
    mag = np.sqrt(power)
    rng = np.random.default_rng(seed)
    win, hop, nfft = cfg.window_samples, cfg.hop_samples, cfg.fft_size
    length = (n - 1) * hop + win if n else 0
    out = np.zeros(length)
    norm = np.zeros(length)
    window = np.hamming(win)
    for i in range(n):
        phase = np.exp(2j * np.pi * rng.random(mag.shape[1]))
        frame = np.fft.irfft(mag[i] * phase, n=nfft)[:win] * window
        out[i * hop:i * hop + win] += frame
        norm[i * hop:i * hop + win] += window ** 2
    out /= np.maximum(norm, 1e-8)
    # undo preemphasis: y[t] = x[t] + a * y[t-1]
    from scipy.signal import lfilter
    out = lfilter([1.0], [1.0, -cfg.preemphasis], out)
    peak = np.abs(out).max() if length else 0.0
    if peak > 0:
        out = 0.9 * out / peak
    return AudioBuffer(out, SAMPLE_RATE)
