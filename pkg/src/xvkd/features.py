"""Acoustic frontend: log-Mel filterbanks, sliding-window mean normalization,
and fixed-length chunking for training.

The filterbank covers 20 Hz to 7600 Hz with 40 triangular filters over a
25 ms Hann window and 10 ms shift at 16 kHz.  Conventional defaults fill the
unspecified details: pre-emphasis 0.97, 512-point FFT, and a 1e-10 energy
floor before the log.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureSequence",
    "CmnConfig",
    "melspec",
    "mel_filter_center_frequencies",
    "windowed_cmn",
    "apply_cmn",
    "chunk",
    "read_wav",
    "SAMPLE_RATE",
    "N_MELS",
    "CHUNK_FRAMES",
]

SAMPLE_RATE = 16000
N_MELS = 40
FRAME_LENGTH_S = 0.025
FRAME_SHIFT_S = 0.010
FMIN_HZ = 20.0
FMAX_HZ = 7600.0
N_FFT = 512
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
CHUNK_FRAMES = 200


@dataclass
class FeatureSequence:
    """A (T, 40) matrix of log-Mel frames with its timing metadata."""

    frames: np.ndarray
    frame_shift: float = FRAME_SHIFT_S
    frame_length: float = FRAME_LENGTH_S
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"feature matrix must be (T>=1, d), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class CmnConfig:
    """Sliding-window mean-normalization settings (window in frames)."""

    window_frames: int = 300
    enabled: bool = True

    def __post_init__(self):
        if self.window_frames < 1:
            raise ValueError("window_frames must be >= 1")


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def _mel_edges(n_mels: int = N_MELS) -> np.ndarray:
    """Filter edge frequencies in Hz: n_mels + 2 points, evenly spaced in mel."""
    return _mel_to_hz(np.linspace(_hz_to_mel(FMIN_HZ), _hz_to_mel(FMAX_HZ), n_mels + 2))


def mel_filter_center_frequencies(n_mels: int = N_MELS) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    return _mel_edges(n_mels)[1:-1]


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filter matrix."""
    edges = _mel_edges(n_mels)
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fbank = np.zeros((n_mels, bin_hz.size))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fbank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fbank


def melspec(waveform, sample_rate: int = SAMPLE_RATE) -> FeatureSequence:
    """40-dimensional log-Mel filterbank features of a 16 kHz waveform.

    Raises on any other sample rate (no resampling) and on waveforms shorter
    than one full 25 ms frame.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate} (no resampling)")
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    frame_len = int(round(FRAME_LENGTH_S * SAMPLE_RATE))
    frame_shift = int(round(FRAME_SHIFT_S * SAMPLE_RATE))
    if x.size < frame_len:
        raise ValueError(f"waveform too short: {x.size} samples < one {frame_len}-sample frame")
    pre = np.empty_like(x)
    pre[0] = x[0] - PREEMPHASIS * x[0]
    pre[1:] = x[1:] - PREEMPHASIS * x[:-1]
    n_frames = (x.size - frame_len) // frame_shift + 1
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(n_frames)[:, None]
    frames = pre[idx]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    spectrum = np.fft.rfft(frames * window, n=N_FFT, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    fbank = _mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE)
    energies = power @ fbank.T
    return FeatureSequence(frames=np.log(np.maximum(energies, LOG_FLOOR)))


def windowed_cmn(frames: np.ndarray, window_frames: int = 300) -> np.ndarray:
    """Subtract a sliding-window mean from each frame.

    The window holds ``min(window_frames, T)`` consecutive frames, centered on
    the current frame and shifted to stay inside the sequence near the edges.
    For ``T <= window_frames`` this reduces to global mean subtraction.
    """
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a (T>=1, d) matrix, got shape {x.shape}")
    T = x.shape[0]
    w = min(window_frames, T)
    starts = np.clip(np.arange(T) - window_frames // 2, 0, T - w)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    means = (csum[starts + w] - csum[starts]) / w
    return x - means


def apply_cmn(frames: np.ndarray, cfg: CmnConfig) -> np.ndarray:
    """Apply :func:`windowed_cmn` when the config enables it."""
    if not cfg.enabled:
        return np.asarray(frames, dtype=np.float64)
    return windowed_cmn(frames, cfg.window_frames)


def chunk(frames, chunk_frames: int = CHUNK_FRAMES) -> list[np.ndarray]:
    """Split a (T, d) matrix into non-overlapping fixed-length chunks.

    Sequences shorter than one chunk are zero-padded to a single chunk.
    A trailing remainder shorter than half a chunk is dropped; longer
    remainders are zero-padded into a final chunk.
    """
    if chunk_frames < 1:
        raise ValueError("chunk_frames must be >= 1")
    if isinstance(frames, FeatureSequence):
        frames = frames.frames
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot chunk an empty sequence")
    T, d = x.shape
    if T < chunk_frames:
        padded = np.zeros((chunk_frames, d))
        padded[:T] = x
        return [padded]
    chunks = [x[i * chunk_frames : (i + 1) * chunk_frames].copy() for i in range(T // chunk_frames)]
    rem = T % chunk_frames
    if rem * 2 >= chunk_frames:
        padded = np.zeros((chunk_frames, d))
        padded[:rem] = x[T - rem :]
        chunks.append(padded)
    return chunks


def read_wav(path) -> np.ndarray:
    """Read a mono 16-bit 16 kHz RIFF file into a float waveform in [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise ValueError(
                f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()} (no resampling)"
            )
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
