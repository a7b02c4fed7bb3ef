"""Mel-to-waveform synthesis.

The reference path inverts the mel filterbank with a Tikhonov-regularised
pseudo-inverse and recovers phase by Griffin-Lim iterations starting from
zero phase, so the result is deterministic.  The external path hands a mel
file to a user-supplied program and reads back the WAV it writes.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import DEFAULT_AUDIO, AudioConfig, MelSpectrogram, Waveform, istft, load_waveform, mel_filterbank, save_mel, stft
from .errors import ConfigError, ContractError, EzvcError


@dataclass(frozen=True)
class VocoderSpec:
    kind: str = "phase_retrieval"
    gl_iters: int = 32
    external_cmd: str | None = None

    def __post_init__(self):
        if self.kind not in ("phase_retrieval", "external"):
            raise ConfigError(f"unknown vocoder kind {self.kind!r}")
        if self.gl_iters < 1:
            raise ConfigError("gl_iters must be >= 1")
        if self.kind == "external" and not self.external_cmd:
            raise ConfigError("external vocoder needs external_cmd")


@lru_cache(maxsize=4)
def inverse_filterbank(cfg: AudioConfig = DEFAULT_AUDIO, reg: float = 1e-4) -> np.ndarray:
    """``(n_bins, n_mels)`` map from mel energies back to linear-frequency power."""
    fb = mel_filterbank(cfg)
    gram = fb @ fb.T
    lam = reg * np.trace(gram) / gram.shape[0]
    inv = fb.T @ np.linalg.inv(gram + lam * np.eye(gram.shape[0]))
    inv.setflags(write=False)
    return inv


def mel_to_linear_magnitude(mel: np.ndarray, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    power = np.exp(np.asarray(mel, dtype=np.float64)) @ inverse_filterbank(cfg).T
    return np.sqrt(np.maximum(power, 0.0))


def griffin_lim(magnitude: np.ndarray, iters: int, cfg: AudioConfig = DEFAULT_AUDIO) -> np.ndarray:
    spec = magnitude.astype(np.complex128)  # zero phase
    x = istft(spec, cfg)
    for _ in range(iters - 1):
        rebuilt = stft(x, cfg)
        spec = magnitude * np.exp(1j * np.angle(rebuilt))
        x = istft(spec, cfg)
    return x


def mel_to_waveform(mel: MelSpectrogram, spec: VocoderSpec = VocoderSpec(), cfg: AudioConfig = DEFAULT_AUDIO) -> Waveform:
    frames = np.asarray(mel.frames)
    if frames.ndim != 2 or frames.shape[1] != cfg.n_mels:
        raise ContractError(f"vocoder expects {cfg.n_mels}-channel mels, got shape {frames.shape}")
    if spec.kind == "external":
        return run_external_vocoder(mel, spec.external_cmd)
    x = griffin_lim(mel_to_linear_magnitude(frames, cfg), spec.gl_iters, cfg)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32), cfg.sample_rate)


def run_external_vocoder(mel: MelSpectrogram, command: str) -> Waveform:
    """Run ``command <mel_path> <wav_path>`` and load the WAV it produces."""
    with tempfile.TemporaryDirectory(prefix="ezvc-voc-") as tmp:
        mel_path = Path(tmp) / "in.mel"
        wav_path = Path(tmp) / "out.wav"
        save_mel(mel, mel_path)
        argv = shlex.split(command) + [str(mel_path), str(wav_path)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise EzvcError(f"external vocoder exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        return load_waveform(wav_path)
