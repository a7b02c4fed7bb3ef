"""Deterministic speech-like test signals.

A small source-filter synthesiser: a glottal pulse train with an intonation
contour (plus aspiration noise) drives cascaded formant resonators for
vowels and nasals, while fricatives and bursts are shaped noise.  Speakers
differ in pitch, vocal-tract length (formant scaling), spectral tilt and
breathiness, which is enough for the desk-scale tests: units follow the
phone sequence and the speaker embedding follows the voice.

The bundled corpus under ``ezvc/data/utterances`` was produced by
:func:`write_bundled_corpus`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import Waveform, save_waveform

SR = 16000

# (F1, F2, F3) in Hz for a reference adult voice
VOWELS = {
    "a": (750, 1200, 2600),
    "e": (500, 1850, 2600),
    "i": (300, 2250, 3000),
    "o": (500, 900, 2400),
    "u": (320, 800, 2300),
}
NASALS = {"m": (250, 1100, 2300), "n": (250, 1600, 2600)}
FRICATIVES = {"s": (4500, 7500), "S": (2200, 5000), "f": (1200, 6500)}
STOPS = ("p", "t", "k")


@dataclass(frozen=True)
class Speaker:
    name: str
    f0: float
    tract_scale: float  # multiplies formant frequencies
    tilt: float  # one-pole low-pass coefficient; larger is darker
    breath: float  # aspiration noise level relative to voicing


SPEAKERS = (
    Speaker("spk0", 105.0, 0.92, 0.75, 0.02),
    Speaker("spk1", 215.0, 1.15, 0.35, 0.06),
    Speaker("spk2", 140.0, 1.00, 0.60, 0.10),
    Speaker("spk3", 180.0, 1.08, 0.15, 0.03),
    Speaker("spk4", 95.0, 0.88, 0.88, 0.08),
)


def _resonator(freq: float, bw: float):
    r = np.exp(-np.pi * bw / SR)
    theta = 2 * np.pi * freq / SR
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def _formant_filter(x: np.ndarray, formants) -> np.ndarray:
    y = x
    for i, f in enumerate(formants):
        f = min(f, SR / 2 - 300)
        b, a = _resonator(f, 60.0 + 40.0 * i)
        y = signal.lfilter(b, a, y)
    return y


def _glottal_source(n: int, f0_track: np.ndarray, rng: np.random.Generator, breath: float) -> np.ndarray:
    phase = np.cumsum(f0_track / SR)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    src = signal.lfilter([1.0], [1.0, -0.95], pulses)  # soften into a glottal-like pulse
    src = src - src.mean()
    return src + breath * rng.standard_normal(n)


def _phone_plan(rng: np.random.Generator, duration: float) -> list[tuple[str, float]]:
    plan = [("_", rng.uniform(0.08, 0.15))]
    total = plan[0][1]
    vowels, cons = list(VOWELS), list(NASALS) + list(FRICATIVES) + list(STOPS)
    while total < duration - 0.2:
        c = cons[rng.integers(len(cons))]
        v = vowels[rng.integers(len(vowels))]
        for ph, d in ((c, rng.uniform(0.05, 0.11)), (v, rng.uniform(0.09, 0.2))):
            plan.append((ph, d))
            total += d
        if rng.random() < 0.15:
            plan.append(("_", rng.uniform(0.05, 0.1)))
            total += plan[-1][1]
    plan.append(("_", max(duration - total, 0.05)))
    return plan


def synthesize(speaker: Speaker, seed: int, duration: float = 1.8) -> Waveform:
    rng = np.random.default_rng(seed)
    plan = _phone_plan(rng, duration)
    n = int(round(sum(d for _, d in plan) * SR))
    t = np.arange(n) / SR
    # declining intonation with a little vibrato-like wobble
    f0 = speaker.f0 * (1.1 - 0.2 * t / t[-1]) * (1 + 0.03 * np.sin(2 * np.pi * rng.uniform(2, 4) * t))
    voiced = _glottal_source(n, f0, rng, speaker.breath)
    noise = rng.standard_normal(n)

    out = np.zeros(n)
    xfade = int(0.015 * SR)
    pos = 0
    for ph, d in plan:
        seg_n = int(round(d * SR))
        lo, hi = max(pos - xfade, 0), min(pos + seg_n + xfade, n)
        if hi <= lo:
            break
        if ph in VOWELS or ph in NASALS:
            formants = [f * speaker.tract_scale for f in (VOWELS.get(ph) or NASALS[ph])]
            seg = _formant_filter(voiced[lo:hi], formants)
            if ph in NASALS:
                seg *= 0.35
        elif ph in FRICATIVES:
            band = [min(f * speaker.tract_scale, SR / 2 - 100) for f in FRICATIVES[ph]]
            sos = signal.butter(4, band, btype="bandpass", fs=SR, output="sos")
            seg = 0.25 * signal.sosfilt(sos, noise[lo:hi])
        elif ph in STOPS:
            seg = np.zeros(hi - lo)
            burst = min(int(0.012 * SR), hi - lo)
            start = (hi - lo) - burst - xfade if (hi - lo) > burst + xfade else 0
            seg[start:start + burst] = 0.6 * noise[lo + start:lo + start + burst]
        else:
            seg = np.zeros(hi - lo)
        win = np.ones(hi - lo)
        ramp = min(xfade, (hi - lo) // 2)
        if ramp > 0:
            win[:ramp] = np.linspace(0, 1, ramp)
            win[-ramp:] = np.linspace(1, 0, ramp)
        out[lo:hi] += seg * win
        pos += seg_n

    out = signal.lfilter([1.0 - speaker.tilt], [1.0, -speaker.tilt], out)  # speaker tilt
    out = out / (np.max(np.abs(out)) + 1e-9) * 0.6
    out = out + 0.003 * rng.standard_normal(n)  # room noise floor
    return Waveform(np.clip(out, -1, 1).astype(np.float32), SR)


def corpus_plan(per_speaker: int = 2) -> list[tuple[str, Speaker, int, float]]:
    plan = []
    for si, spk in enumerate(SPEAKERS):
        for j in range(per_speaker):
            seed = 1000 + 10 * si + j
            duration = 1.6 + 0.2 * ((si + j) % 3)
            plan.append((f"{spk.name}_utt{j}", spk, seed, duration))
    return plan


def write_bundled_corpus(out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    meta = []
    for utt_id, spk, seed, duration in corpus_plan():
        w = synthesize(spk, seed, duration)
        path = out_dir / f"{utt_id}.wav"
        save_waveform(w, path)
        paths.append(path)
        meta.append({"id": utt_id, "speaker": spk.name, "seed": seed, "duration": duration})
    (out_dir / "speakers.json").write_text(json.dumps(meta, indent=1) + "\n")
    return paths


def bundled_corpus_dir() -> Path:
    return Path(str(resources.files("ezvc") / "data" / "utterances"))


def bundled_utterances() -> list[Path]:
    return sorted(bundled_corpus_dir().glob("*.wav"))


def bundled_speakers() -> dict[str, str]:
    meta = json.loads((bundled_corpus_dir() / "speakers.json").read_text())
    return {m["id"]: m["speaker"] for m in meta}
