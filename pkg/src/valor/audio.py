"""Log-Mel filterbank featurization of raw waveforms.

Defaults give 64 mel bins x 512 frames per 5-second clip at 16 kHz
(25 ms Hamming window, 10 ms hop). Five seconds only yields 498 STFT frames,
so the frame axis is right-padded with the log floor.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError

SAMPLE_RATE = 16000
N_MELS = 64
TARGET_FRAMES = 512
CLIP_SECONDS = 5.0
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                           fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(points[1:-1])


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters with unit peak, shape [n_mels, n_fft // 2 + 1]."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None] - lower) / (center - lower)
    falling = (upper - freqs[None]) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def mel_spectrogram(waveform, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS,
                    win_ms: float = 25.0, hop_ms: float = 10.0,
                    target_frames: int | None = TARGET_FRAMES,
                    floor: float = LOG_FLOOR) -> np.ndarray:
    """Log-Mel spectrogram ``[n_mels, frames]`` of a mono waveform."""
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if sample_rate <= 0:
        raise InputError("sample_rate must be positive")
    win = int(round(sample_rate * win_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if x.size < win:
        raise InputError(f"waveform has {x.size} samples, shorter than one {win}-sample window")
    if not np.isfinite(x).all():
        raise InputError("waveform contains non-finite samples")
    n_fft = 1 << (win - 1).bit_length()
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    magnitude = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    mel = mel_filterbank(n_mels, n_fft, sample_rate) @ magnitude.T
    logmel = np.log(np.maximum(mel, floor))
    if target_frames is not None:
        if logmel.shape[1] >= target_frames:
            logmel = logmel[:, :target_frames]
        else:
            pad = np.full((n_mels, target_frames - logmel.shape[1]), np.log(floor))
            logmel = np.concatenate([logmel, pad], axis=1)
    return logmel


def split_clips(waveform, sample_rate: int = SAMPLE_RATE, seconds: float = CLIP_SECONDS) -> list[np.ndarray]:
    """Cut into consecutive clips of ``seconds``; the tail is zero-padded."""
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    n = int(round(seconds * sample_rate))
    count = max(1, -(-x.size // n))
    padded = np.zeros(count * n)
    padded[: x.size] = x
    return [padded[i * n:(i + 1) * n] for i in range(count)]


def waveform_spectrograms(waveform, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """All 5-second clips of a waveform as a ``[N_a, 64, 512]`` stack."""
    return np.stack([mel_spectrogram(c, sample_rate) for c in split_clips(waveform, sample_rate)])


def read_waveform(path: str | Path) -> np.ndarray:
    """Headerless little-endian float32 samples."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise InputError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_waveform(path: str | Path, waveform) -> None:
    Path(path).write_bytes(np.asarray(waveform, dtype="<f4").tobytes())
