from __future__ import annotations

import numpy as np
import pytest

from ezvc.audio import Waveform, load_waveform
from ezvc.encoder import EncoderSpec, embed
from ezvc.quantizer import train_kmeans
from ezvc.synthetic import bundled_utterances

SR = 16000


def sine(freq: float, seconds: float, sr: int = SR, amp: float = 0.5) -> Waveform:
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def harmonic(f0: float, seconds: float, sr: int = SR, n_harm: int = 12, seed: int = 0) -> Waveform:
    """Decaying harmonic series with a slow amplitude envelope."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(seconds * sr))) / sr
    x = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        if h * f0 >= sr / 2:
            break
        x += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * 1.5 * t)
    return Waveform(0.5 * x / np.max(np.abs(x)), sr)


@pytest.fixture(scope="session")
def waves() -> dict[str, Waveform]:
    return {p.stem: load_waveform(p) for p in bundled_utterances()}


@pytest.fixture(scope="session")
def enc() -> EncoderSpec:
    return EncoderSpec(kind="surrogate", dim=512, seed=0)


@pytest.fixture(scope="session")
def codebook(waves, enc):
    emb = [embed(w, enc).vectors for w in waves.values()]
    cb = train_kmeans(emb, k=64, seed=0, trained_on="bundled")
    cb.meta = {"encoder": enc.source_tag}
    return cb


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request) -> dict:
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
