"""WAV ingest, log-mel frontend, SpecAugment, noise injection."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multidiac import audiofe as af
from multidiac.audiofe import (
    HOP, N_FFT, SAMPLE_RATE, MelSpectrogram, Waveform, filterbank_centers,
    inject_noise, load_wav, log_mel, mel_filterbank, save_wav, spec_augment,
)
from multidiac.errors import ConfigError, FormatError, IngestError
from multidiac.numerics import RngStream


def sine(freq, seconds=0.5, amp=0.3):
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32))


# -- wav io --------------------------------------------------------------


def test_wav_round_trip(tmp_path):
    w = sine(440)
    p = tmp_path / "a.wav"
    save_wav(p, w)
    back = load_wav(p)
    assert back.sample_rate == SAMPLE_RATE
    assert len(back.samples) == len(w.samples)
    assert np.abs(back.samples - w.samples).max() < 1.0 / 32767


def test_wav_float32_codec(tmp_path):
    w = sine(200, seconds=0.1)
    data = w.samples.astype("<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, SAMPLE_RATE, SAMPLE_RATE * 4, 4, 32)
    p = tmp_path / "f.wav"
    with open(p, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)) + b"WAVE")
        f.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        f.write(b"data" + struct.pack("<I", len(data)) + data)
    back = load_wav(p)
    assert np.array_equal(back.samples, w.samples)


def test_wav_rejects_wrong_rate(tmp_path):
    p = tmp_path / "r.wav"
    save_wav(p, Waveform(np.zeros(100, dtype=np.float32), sample_rate=8000))
    with pytest.raises(IngestError):
        load_wav(p)


def test_wav_rejects_stereo(tmp_path):
    data = np.zeros(100, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 2, SAMPLE_RATE, SAMPLE_RATE * 4, 4, 16)
    p = tmp_path / "s.wav"
    with open(p, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE")
        f.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        f.write(b"data" + struct.pack("<I", len(data)) + data)
    with pytest.raises(IngestError):
        load_wav(p)


def test_wav_rejects_garbage(tmp_path):
    p = tmp_path / "g.wav"
    p.write_bytes(b"not a wav at all")
    with pytest.raises(FormatError):
        load_wav(p)


def test_wav_rejects_truncated_data(tmp_path):
    good = tmp_path / "t.wav"
    save_wav(good, sine(100, seconds=0.05))
    blob = good.read_bytes()
    (tmp_path / "cut.wav").write_bytes(blob[:len(blob) - 40])
    with pytest.raises(FormatError):
        load_wav(tmp_path / "cut.wav")


# -- filterbank ----------------------------------------------------------


def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(80)
    assert fb.shape == (80, N_FFT // 2 + 1)
    assert (fb >= 0).all()
    # every filter has some mass, centers increase
    assert (fb.sum(axis=1) > 0).all()
    centers = filterbank_centers(80)
    assert len(centers) == 80
    assert (np.diff(centers) > 0).all()
    assert centers[-1] < SAMPLE_RATE / 2


def test_filterbank_is_htk_mel_spaced():
    centers = filterbank_centers(80)
    mels = 2595.0 * np.log10(1.0 + centers / 700.0)
    gaps = np.diff(mels)
    assert np.allclose(gaps, gaps[0], rtol=1e-6)


# -- log-mel -------------------------------------------------------------


def test_log_mel_shape_and_range():
    m = log_mel(sine(440, seconds=1.0), mels=80)
    assert m.mels == 80
    assert m.frames == math.ceil(SAMPLE_RATE * 1.0 / HOP)
    # (log10 clamp at max-8, then (x+4)/4) bounds the dynamic range to 2
    assert m.values.max() - m.values.min() <= 2.0 + 1e-6


def test_log_mel_frame_budget_pad_and_trim():
    w = sine(440, seconds=0.5)
    padded = log_mel(w, mels=40, frame_budget=100)
    assert padded.frames == 100
    base = log_mel(w, mels=40)
    assert np.array_equal(padded.values[:, :base.frames], base.values)
    assert np.all(padded.values[:, base.frames:] == base.values.min())
    trimmed = log_mel(w, mels=40, frame_budget=10)
    assert trimmed.frames == 10
    assert np.array_equal(trimmed.values, base.values[:, :10])


def test_log_mel_peaks_at_tone_frequency():
    centers = filterbank_centers(80)
    for freq in (300, 1000, 3000):
        m = log_mel(sine(freq, seconds=0.3), mels=80)
        peak_bin = int(m.values.mean(axis=1).argmax())
        assert abs(centers[peak_bin] - freq) < 150


def test_log_mel_silence_is_flat():
    m = log_mel(Waveform(np.zeros(SAMPLE_RATE // 4, dtype=np.float32)))
    assert np.allclose(m.values, m.values.flat[0])


# -- spec augment --------------------------------------------------------


def test_spec_augment_masks_to_minimum():
    m = log_mel(sine(500, seconds=0.5), mels=40)
    out = spec_augment(m, freq_param=10, time_param=20, rng=RngStream(3))
    assert out.values.shape == m.values.shape
    changed = out.values != m.values
    assert changed.any()
    assert np.all(out.values[changed] == m.values.min())
    # one contiguous frequency band, one contiguous time band
    rows = np.nonzero(changed.all(axis=1))[0]
    if rows.size:
        assert np.array_equal(rows, np.arange(rows[0], rows[-1] + 1))
    cols = np.nonzero(changed.all(axis=0))[0]
    if cols.size:
        assert np.array_equal(cols, np.arange(cols[0], cols[-1] + 1))


def test_spec_augment_band_width_bounds():
    m = log_mel(sine(500, seconds=0.5), mels=40)
    for seed in range(20):
        out = spec_augment(m, freq_param=5, time_param=8, rng=RngStream(seed))
        changed = out.values != m.values
        full_rows = changed.all(axis=1).sum()
        full_cols = changed.all(axis=0).sum()
        assert full_rows <= 5
        assert full_cols <= 8


def test_spec_augment_deterministic_and_pure():
    m = log_mel(sine(500, seconds=0.2), mels=40)
    before = m.values.copy()
    a = spec_augment(m, 10, 10, RngStream(9))
    b = spec_augment(m, 10, 10, RngStream(9))
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(m.values, before)


def test_spec_augment_rejects_oversized_params():
    m = MelSpectrogram(np.zeros((8, 10), dtype=np.float32))
    with pytest.raises(ConfigError):
        spec_augment(m, freq_param=9, time_param=1, rng=RngStream(0))
    with pytest.raises(ConfigError):
        spec_augment(m, freq_param=1, time_param=11, rng=RngStream(0))


# -- noise injection -----------------------------------------------------


def test_inject_noise_hits_requested_snr():
    w = sine(440, seconds=2.0)
    sig_p = float(np.mean(w.samples.astype(np.float64) ** 2))
    out = inject_noise(w, (20.0, 20.0), RngStream(4))
    noise = out.samples.astype(np.float64) - w.samples.astype(np.float64)
    snr_db = 10 * np.log10(sig_p / np.mean(noise ** 2))
    assert abs(snr_db - 20.0) < 0.5


def test_inject_noise_uniform_draw_within_range():
    w = sine(440, seconds=0.5)
    sig_p = float(np.mean(w.samples.astype(np.float64) ** 2))
    snrs = []
    for seed in range(30):
        out = inject_noise(w, (10.0, 30.0), RngStream(seed))
        noise = out.samples.astype(np.float64) - w.samples.astype(np.float64)
        snrs.append(10 * np.log10(sig_p / np.mean(noise ** 2)))
    snrs = np.array(snrs)
    assert (snrs > 9.0).all() and (snrs < 31.0).all()
    assert snrs.std() > 2.0  # actually varies across the range


def test_inject_noise_silence_passthrough():
    w = Waveform(np.zeros(1000, dtype=np.float32))
    assert inject_noise(w, (10.0, 30.0), RngStream(0)) is w


def test_inject_noise_deterministic():
    w = sine(440, seconds=0.1)
    a = inject_noise(w, (10.0, 30.0), RngStream(11))
    b = inject_noise(w, (10.0, 30.0), RngStream(11))
    assert np.array_equal(a.samples, b.samples)


# -- properties ----------------------------------------------------------


@given(st.integers(1, 3 * HOP), st.integers(0, 2 ** 16))
@settings(max_examples=40, deadline=None)
def test_log_mel_frame_count(n, seed):
    gen = np.random.default_rng(seed)
    w = Waveform(gen.normal(0, 0.1, size=n).astype(np.float32))
    m = log_mel(w, mels=20)
    assert m.frames == max(1, math.ceil(n / HOP))
    assert np.isfinite(m.values).all()
