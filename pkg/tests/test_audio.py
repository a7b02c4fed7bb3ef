from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from ezvc.audio import (
    DEFAULT_AUDIO,
    MelSpectrogram,
    Waveform,
    load_mel,
    load_waveform,
    log_mel,
    mel_filterbank,
    resample,
    save_mel,
    save_waveform,
)
from ezvc.errors import ContractError, DomainError, FormatError

from conftest import sine

FLOOR = math.log(1e-5)


def test_load_16bit_mono(tmp_path):
    x = (np.sin(np.arange(16000) / 10) * 20000).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 16000, x)
    w = load_waveform(tmp_path / "a.wav")
    assert w.sample_rate == 16000 and len(w) == 16000
    np.testing.assert_allclose(w.samples, x / 32768.0, atol=1e-7)


def test_stereo_opposite_channels_mix_to_zero(tmp_path):
    x = (np.random.default_rng(0).uniform(-1, 1, 8000) * 30000).astype(np.int16)
    wavfile.write(tmp_path / "s.wav", 16000, np.stack([x, -x], axis=1))
    assert np.all(load_waveform(tmp_path / "s.wav").samples == 0)


def test_no_implicit_resample(tmp_path):
    wavfile.write(tmp_path / "r.wav", 24000, np.zeros(2400, dtype=np.int16))
    assert load_waveform(tmp_path / "r.wav").sample_rate == 24000


@pytest.mark.parametrize("dtype,scale", [(np.uint8, None), (np.int32, 2**31), (np.float32, 1.0)])
def test_other_encodings_scale_into_unit_range(tmp_path, dtype, scale):
    ramp = np.linspace(-0.9, 0.9, 1000)
    if dtype is np.uint8:
        data = np.round(ramp * 128 + 128).astype(np.uint8)
    elif dtype is np.int32:
        data = np.round(ramp * 2**31).astype(np.int32)
    else:
        data = ramp.astype(np.float32)
    wavfile.write(tmp_path / "e.wav", 16000, data)
    w = load_waveform(tmp_path / "e.wav")
    np.testing.assert_allclose(w.samples, ramp, atol=1e-2)


def test_missing_and_non_wav_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_waveform(tmp_path / "nope.wav")
    (tmp_path / "bad.wav").write_bytes(b"not a riff file at all")
    with pytest.raises(FormatError):
        load_waveform(tmp_path / "bad.wav")


def test_save_load_roundtrip(tmp_path):
    w = sine(220, 0.3)
    save_waveform(w, tmp_path / "o.wav")
    back = load_waveform(tmp_path / "o.wav")
    np.testing.assert_allclose(back.samples, w.samples, atol=1 / 32768 + 1e-6)


def test_waveform_rejects_non_finite():
    with pytest.raises(ContractError):
        Waveform(np.array([0.0, np.nan]), 16000)
    with pytest.raises(ContractError):
        Waveform(np.zeros(3), 0)


def test_resample_identity_is_bitwise():
    w = sine(100, 0.5)
    out = resample(w, 16000)
    assert out.samples.tobytes() == w.samples.tobytes()
    assert out.samples is not w.samples


def test_resample_48k_duration():
    out = resample(sine(100, 1.0, sr=48000), 16000)
    assert out.sample_rate == 16000
    assert abs(len(out) - 16000) <= 1


def test_resampled_sine_matches_analytic():
    out = resample(sine(100, 1.0, sr=48000), 16000)
    ref = sine(100, 1.0, sr=16000).samples[: len(out)]
    # ignore the filter's edge transients
    corr = np.corrcoef(out.samples[200:-200], ref[200:-200])[0, 1]
    assert corr > 0.999


@pytest.mark.parametrize("r", [8000, 22050, 24000, 44100, 48000])
def test_resample_roundtrip_preserves_duration(r):
    w = sine(300, 0.77)
    back = resample(resample(w, r), w.sample_rate)
    assert abs(len(back) - len(w)) <= 2


def test_one_second_gives_100_frames():
    mel = log_mel(sine(440, 1.0))
    assert mel.frames.shape == (100, 80)
    assert mel.hop_samples == 160 and mel.sample_rate == 16000


def test_silence_hits_floor_exactly():
    mel = log_mel(Waveform(np.zeros(16000), 16000))
    assert np.all(mel.frames == np.float32(FLOOR))


def test_white_noise_frames_finite_and_varied():
    w = Waveform(np.random.default_rng(3).uniform(-0.5, 0.5, 16000), 16000)
    f = log_mel(w).frames
    assert f.shape[0] == 100 and np.all(np.isfinite(f))
    assert np.all(f.var(axis=0) > 0)


def test_log_mel_guards():
    with pytest.raises(ContractError):
        log_mel(sine(100, 0.5, sr=8000))
    with pytest.raises(DomainError):
        log_mel(Waveform(np.zeros(0), 16000))


def test_filterbank_shape_and_peaks():
    fb = mel_filterbank(DEFAULT_AUDIO)
    assert fb.shape == (80, DEFAULT_AUDIO.n_fft // 2 + 1)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) <= 1.0 + 1e-9)
    assert np.all(fb.sum(axis=1) > 0)


def test_hop_shift_moves_frames_by_one():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(16000 + 160) * 0.1
    a = log_mel(Waveform(x[160:], 16000)).frames
    b = log_mel(Waveform(x, 16000)).frames
    # a[i] and b[i + 1] are centred on the same sample; skip frames near the padded edges
    assert a.shape[0] == 100 and b.shape[0] == 101
    np.testing.assert_allclose(a[5:95], b[6:96], atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(min_value=160, max_value=12000), seed=st.integers(0, 2**16))
def test_frame_count_and_floor(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    f = log_mel(Waveform(x, 16000)).frames
    assert f.shape == (n // 160, 80)
    assert np.all(f >= np.float32(FLOOR))


def test_mel_file_roundtrip_and_guards(tmp_path):
    mel = log_mel(sine(300, 0.5))
    save_mel(mel, tmp_path / "a.mel")
    back = load_mel(tmp_path / "a.mel")
    assert back.frames.tobytes() == mel.frames.tobytes()
    raw = (tmp_path / "a.mel").read_bytes()
    assert raw.startswith(b"EZVCMEL1\n")
    (tmp_path / "t.mel").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_mel(tmp_path / "t.mel")
    (tmp_path / "m.mel").write_bytes(b"XXXXMEL1\n" + raw[9:])
    with pytest.raises(FormatError):
        load_mel(tmp_path / "m.mel")


def test_mel_type_rejects_1d():
    with pytest.raises(ContractError):
        MelSpectrogram(np.zeros(80))
