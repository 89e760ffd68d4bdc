"""Tests for the acoustic frontend: filterbanks, mean normalization, chunking."""

import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import sliding_mean_oracle
from xvkd.features import (
    CmnConfig,
    FeatureSequence,
    chunk,
    mel_filter_center_frequencies,
    melspec,
    read_wav,
    windowed_cmn,
)


class TestMelspec:
    def test_silence_hits_log_floor(self):
        feats = melspec(np.zeros(16000))
        np.testing.assert_allclose(feats.frames, np.log(1e-10), atol=1e-12)

    def test_pure_sine_peaks_at_its_filter(self):
        centers = mel_filter_center_frequencies()
        k = 20
        t = np.arange(16000) / 16000.0
        tone = 0.5 * np.sin(2.0 * np.pi * centers[k] * t)
        feats = melspec(tone)
        assert (feats.frames.argmax(axis=1) == k).all()

    def test_one_second_gives_98_frames(self):
        # (16000 - 400) / 160 + 1
        feats = melspec(np.random.default_rng(0).normal(size=16000))
        assert feats.n_frames == 98

    def test_polarity_inversion_invariance(self):
        rng = np.random.default_rng(1)
        wav = rng.normal(size=8000)
        a = melspec(wav).frames
        b = melspec(-wav).frames
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_rejects_wrong_sample_rate(self):
        with pytest.raises(ValueError, match="no resampling"):
            melspec(np.zeros(8000), sample_rate=8000)

    def test_rejects_too_short_waveform(self):
        with pytest.raises(ValueError, match="too short"):
            melspec(np.zeros(399))

    def test_feature_sequence_validates(self):
        with pytest.raises(ValueError):
            FeatureSequence(frames=np.full((2, 40), np.nan))


class TestWindowedCmn:
    def test_full_window_removes_global_mean(self):
        rng = np.random.default_rng(2)
        x = rng.normal(2.0, 1.0, size=(120, 5))
        out = windowed_cmn(x, 300)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)

    def test_constant_sequence_maps_to_zero(self):
        x = np.tile([3.0, -1.0], (50, 1))
        np.testing.assert_allclose(windowed_cmn(x, 10), 0.0, atol=1e-12)

    def test_truncated_windows_match_oracle(self):
        x = np.arange(1.0, 6.0).reshape(5, 1)
        expected = sliding_mean_oracle(x, 3)
        np.testing.assert_allclose(windowed_cmn(x, 3), expected, atol=1e-12)
        # frozen oracle values for the 5-frame ramp with a 3-frame window
        np.testing.assert_allclose(expected.ravel(), [-1.0, 0.0, 0.0, 0.0, 1.0], atol=1e-12)

    def test_idempotent_when_shorter_than_window(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 8))
        once = windowed_cmn(x, 300)
        twice = windowed_cmn(once, 300)
        assert np.abs(twice - once).max() < 1e-9

    @given(
        n_frames=st.integers(min_value=1, max_value=60),
        window=st.integers(min_value=1, max_value=70),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    @settings(max_examples=40, deadline=None)
    def test_matches_oracle_for_all_shapes(self, n_frames, window, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n_frames, 3))
        np.testing.assert_allclose(
            windowed_cmn(x, window), sliding_mean_oracle(x, window), atol=1e-10
        )

    def test_cmn_config_validation(self):
        with pytest.raises(ValueError):
            CmnConfig(window_frames=0)


class TestChunk:
    def test_exact_multiple(self):
        parts = chunk(np.ones((400, 4)), 200)
        assert len(parts) == 2
        assert all(p.shape == (200, 4) for p in parts)

    def test_short_sequence_zero_padded(self):
        x = np.ones((150, 4))
        parts = chunk(x, 200)
        assert len(parts) == 1
        np.testing.assert_array_equal(parts[0][:150], x)
        np.testing.assert_array_equal(parts[0][150:], 0.0)

    def test_long_remainder_padded(self):
        parts = chunk(np.ones((520, 4)), 200)
        assert len(parts) == 3
        np.testing.assert_array_equal(parts[2][:120], 1.0)
        np.testing.assert_array_equal(parts[2][120:], 0.0)

    def test_short_remainder_dropped(self):
        parts = chunk(np.ones((430, 4)), 200)
        assert len(parts) == 2

    def test_concatenation_reproduces_prefix(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(520, 3))
        parts = chunk(x, 200)
        stacked = np.concatenate(parts)[:520]
        np.testing.assert_array_equal(stacked, x)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            chunk(np.zeros((0, 4)), 200)


class TestReadWav:
    def write_wav(self, path, samples, rate=16000, channels=1, width=2):
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(channels)
            fh.setsampwidth(width)
            fh.setframerate(rate)
            fh.writeframes(samples.astype("<i2").tobytes())

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        samples = (rng.uniform(-0.5, 0.5, size=1600) * 32768).astype(np.int16)
        path = tmp_path / "x.wav"
        self.write_wav(path, samples)
        wav = read_wav(path)
        np.testing.assert_allclose(wav, samples / 32768.0, atol=1e-9)

    def test_rejects_wrong_rate(self, tmp_path):
        path = tmp_path / "bad.wav"
        self.write_wav(path, np.zeros(100, dtype=np.int16), rate=8000)
        with pytest.raises(ValueError, match="8000"):
            read_wav(path)

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / "bad.wav"
        self.write_wav(path, np.zeros(100, dtype=np.int16), channels=2)
        with pytest.raises(ValueError, match="mono"):
            read_wav(path)
