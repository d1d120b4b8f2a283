import numpy as np

from u2u.features import FeatureConfig, FeatureKind
from u2u.pipeline import units_to_audio
from u2u.quantizer import Codebook


def test_units_to_audio_shape(rng):
    cb = Codebook(rng.normal(size=(8, 13)), FeatureKind.MFCC)
    a = units_to_audio(rng.integers(0, 8, 25), cb)
    assert a.sample_rate == 16000
    assert len(a) == 24 * 320 + 400
    assert np.abs(a.samples).max() <= 1.0
    again = units_to_audio(rng.integers(0, 8, 25), cb, seed=0)
    assert len(again) == len(a)
    assert len(units_to_audio([], cb)) == 0


def test_units_to_audio_needs_mfcc(rng):
    import pytest
    with pytest.raises(ValueError):
        units_to_audio([0], Codebook(rng.normal(size=(4, 80)), FeatureKind.LOGMEL), FeatureConfig())
