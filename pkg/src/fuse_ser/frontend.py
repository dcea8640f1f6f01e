"""Waveform to log-Mel spectrogram conversion."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window_ms: float = 32.0
    hop_ms: float = 10.0
    n_mels: int = 64
    f_min: float = 50.0
    f_max: Optional[float] = None
    floor: float = 1e-10
    center: bool = True
    max_duration: Optional[float] = None
    normalize: bool = False

    @property
    def window_size(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise ValueError("empty waveform")


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray  # [T, n_mels]
    frame_rate: float
    mel_config: FrontendConfig


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window (the usual choice for spectral analysis)."""
    n = np.arange(size, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)


def expected_frames(n_samples: int, window_size: int, hop: int, center: bool = True) -> int:
    padded = n_samples + (2 * (window_size // 2) if center else 0)
    return (padded - window_size) // hop + 1


def stft(wave: Waveform, window_size: int, hop: int, center: bool = True) -> np.ndarray:
    """Magnitude STFT, shape ``[frames, window_size // 2 + 1]``.

    With ``center`` the signal is reflect-padded by half a window on each side.
    """
    x = wave.samples.astype(np.float64)
    if center:
        pad = window_size // 2
        mode = "reflect" if x.size > pad else "constant"
        x = np.pad(x, (pad, pad), mode=mode)
    if x.size < window_size:
        raise ValueError(f"signal of {x.size} samples shorter than window {window_size}")
    n_frames = (x.size - window_size) // hop + 1
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(window_size)
    return np.abs(np.fft.rfft(frames, axis=-1))


def mel_filterbank(
    n_fft_bins: int,
    n_mels: int = 64,
    f_min: float = 50.0,
    f_max: Optional[float] = None,
    sample_rate: int = 16000,
) -> np.ndarray:
    """Triangular filters with centres equally spaced on the mel scale.

    Returns ``[n_mels, n_fft_bins]``; bin ``k`` sits at ``k * sr / n_fft``.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not (0.0 <= f_min < f_max <= sample_rate / 2.0):
        raise ValueError(f"degenerate frequency range [{f_min}, {f_max}] at {sample_rate} Hz")
    n_fft = 2 * (n_fft_bins - 1)
    bin_hz = np.arange(n_fft_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (centre - lower)
    falling = (upper - bin_hz[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"mel filters {empty.tolist()} cover no FFT bin; use fewer mels or a larger FFT"
        )
    return fb


def filter_centres(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def fit_duration(samples: np.ndarray, n_target: int) -> np.ndarray:
    """Centre-crop or zero-pad (at the end) to exactly ``n_target`` samples."""
    n = samples.size
    if n > n_target:
        start = (n - n_target) // 2
        return samples[start:start + n_target]
    if n < n_target:
        return np.pad(samples, (0, n_target - n))
    return samples


def log_mel(wave: Waveform, config: FrontendConfig = FrontendConfig()) -> LogMelSpectrogram:
    if wave.sample_rate != config.sample_rate:
        raise ValueError(
            f"waveform rate {wave.sample_rate} Hz != configured {config.sample_rate} Hz"
        )
    if config.max_duration is not None:
        target = int(round(config.max_duration * config.sample_rate))
        wave = Waveform(fit_duration(wave.samples, target), wave.sample_rate)
    n = config.window_size
    mag = stft(wave, n, config.hop, center=config.center)
    fb = mel_filterbank(n // 2 + 1, config.n_mels, config.f_min, config.f_max, config.sample_rate)
    energy = (mag * mag) @ fb.T
    frames = np.log(np.maximum(energy, config.floor))
    if config.normalize:
        std = frames.std()
        frames = (frames - frames.mean()) / (std if std > 0 else 1.0)
    return LogMelSpectrogram(frames.astype(np.float32), config.sample_rate / config.hop, config)


def read_wav(path) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, int(rate))


def write_wav(path, wave: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    wavfile.write(path, wave.sample_rate, data)
