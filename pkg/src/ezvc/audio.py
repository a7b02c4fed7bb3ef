"""Waveform I/O, resampling and the 80-bin log-mel front-end.

Framing convention: the signal is reflect-padded by ``n_fft // 2`` on both
sides and frame ``i`` is centred on sample ``i * hop``.  Only frames whose
centre lies inside the signal are kept, so a waveform of ``n`` samples gives
exactly ``n // hop`` frames (librosa-style centring would give one more).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .container import check_version, read_matrix, write_matrix
from .errors import ContractError, DomainError, FormatError

MEL_MAGIC = b"EZVCMEL1\n"


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 640
    hop_length: int = 160
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5


DEFAULT_AUDIO = AudioConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    hop_samples: int = 160
    sample_rate: int = 16000

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ContractError(f"mel must be a 2-D matrix, got shape {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]


def load_waveform(path: str | os.PathLike) -> Waveform:
    """Read a PCM WAV file, mix to mono by channel mean and scale to [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        sr, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise FormatError(f"{path}: not a readable PCM WAV ({exc})") from None

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample encoding {data.dtype}")

    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(np.clip(x, -1.0, 1.0), int(sr))


def save_waveform(w: Waveform, path: str | os.PathLike) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(path, w.sample_rate, pcm)


def resample(w: Waveform, target_sr: int) -> Waveform:
    """Polyphase windowed-sinc resampling."""
    if target_sr <= 0:
        raise ContractError(f"target_sr must be positive, got {target_sr}")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(target_sr, w.sample_rate)
    up, down = target_sr // g, w.sample_rate // g
    y = signal.resample_poly(w.samples.astype(np.float64), up, down, window=("kaiser", 5.0))
    return Waveform(np.clip(y, -1.0, 1.0), target_sr)


def to_model_rate(w: Waveform, cfg: AudioConfig = DEFAULT_AUDIO) -> Waveform:
    return w if w.sample_rate == cfg.sample_rate else resample(w, cfg.sample_rate)


def hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz, min_log_mel, logstep = 1000.0, 15.0, math.log(6.4) / 27.0
    lin = f / f_sp
    log = min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep
    return np.where(f >= min_log_hz, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz, min_log_mel, logstep = 1000.0, 15.0, math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    n_bins = cfg.n_fft // 2 + 1
    fft_hz = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_hz[None, :] - lower) / (centre - lower)
    falling = (upper - fft_hz[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def analysis_window(cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    """Periodic Hann of ``win_length`` zero-padded (centred) to ``n_fft``."""
    win = signal.get_window("hann", cfg.win_length, fftbins=True)
    left = (cfg.n_fft - cfg.win_length) // 2
    out = np.zeros(cfg.n_fft)
    out[left:left + cfg.win_length] = win
    out.setflags(write=False)
    return out


def num_frames(num_samples: int, cfg: AudioConfig = DEFAULT_AUDIO) -> int:
    return num_samples // cfg.hop_length


def stft(x: np.ndarray, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    """Complex STFT, shape ``(n // hop, n_fft // 2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = num_frames(x.shape[0], cfg)
    if n_frames < 1:
        raise DomainError(f"need at least {cfg.hop_length} samples, got {x.shape[0]}")
    pad = cfg.n_fft // 2
    y = np.pad(x, (pad, pad), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(y, cfg.n_fft)[::cfg.hop_length][:n_frames]
    return np.fft.rfft(frames * analysis_window(cfg), axis=-1)


def istft(spec: np.ndarray, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; returns ``T * hop`` samples."""
    n_frames = spec.shape[0]
    length = n_frames * cfg.hop_length
    win = analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1) * win
    pad = cfg.n_fft // 2
    total = length + 2 * pad + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        s = i * cfg.hop_length
        out[s:s + cfg.n_fft] += frames[i]
        norm[s:s + cfg.n_fft] += win ** 2
    out = out[pad:pad + length]
    norm = norm[pad:pad + length]
    return out / np.maximum(norm, 1e-8)


def log_mel(w: Waveform, cfg: AudioConfig = DEFAULT_AUDIO) -> MelSpectrogram:
    """Natural log of mel filterbank power, floored at ``cfg.log_floor``."""
    if w.sample_rate != cfg.sample_rate:
        raise ContractError(f"log_mel expects {cfg.sample_rate} Hz input, got {w.sample_rate}")
    if len(w) == 0:
        raise DomainError("cannot analyse an empty waveform")
    power = np.abs(stft(w.samples, cfg)) ** 2
    mel = power @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames.astype(np.float32), cfg.hop_length, cfg.sample_rate)


def save_mel(mel: MelSpectrogram, path: str | os.PathLike) -> None:
    header = {
        "version": 1,
        "frames": mel.num_frames,
        "channels": mel.channels,
        "hop": mel.hop_samples,
        "sr": mel.sample_rate,
    }
    write_matrix(path, MEL_MAGIC, header, mel.frames)


def load_mel(path: str | os.PathLike) -> MelSpectrogram:
    header, frames = read_matrix(path, MEL_MAGIC, "frames", "channels")
    check_version(header, path)
    return MelSpectrogram(frames, int(header.get("hop", 160)), int(header.get("sr", 16000)))
