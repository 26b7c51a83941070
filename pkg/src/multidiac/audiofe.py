"""Audio ingestion and training-time augmentation.

WAV ingest is strict: RIFF container, 16 kHz mono, PCM16 or IEEE float32.
Features follow the familiar speech-encoder frontend: 25 ms Hann window,
10 ms hop, 80 mel filters, log10 power clamped 8 below the per-utterance
max, then affinely rescaled into roughly [-1, 1]. Augmentation order is
noise injection on the waveform, then log-mel, then SpecAugment.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, IngestError
from .numerics import RngStream

SAMPLE_RATE = 16000
N_FFT = 400
HOP = 160


@dataclass
class Waveform:
    samples: np.ndarray  # float32 in [-1, 1], mono
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (mels, frames) float32

    @property
    def mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def load_wav(path) -> Waveform:
    """Read a 16 kHz mono PCM16/float32 WAV file, scaled to [-1, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE container")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: truncated chunk {chunk_id!r}")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt/data chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if channels != 1:
        raise IngestError(f"{path}: expected mono, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise IngestError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(data, dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise IngestError(f"{path}: unsupported codec (format {audio_format}, "
                          f"{bits}-bit); need PCM16 or float32")
    return Waveform(samples=samples)


def save_wav(path, w: Waveform):
    """Write PCM16 little-endian mono WAV."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)) + b"WAVE")
        f.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        f.write(b"data" + struct.pack("<I", len(data)) + data)


@functools.lru_cache(maxsize=8)
def mel_filterbank(mels: int, n_fft: int = N_FFT, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filterbank, (mels, n_fft//2 + 1). Cached; treat
    the returned array as read-only."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0, rate / 2, n_bins)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2), mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((mels, n_bins))
    for m in range(mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def filterbank_centers(mels: int, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    def hz_to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    mel_pts = np.linspace(0.0, hz_to_mel(rate / 2), mels + 2)
    return 700.0 * (10.0 ** (mel_pts[1:-1] / 2595.0) - 1.0)


def log_mel(w: Waveform, mels: int = 80, frame_budget: int | None = None) -> MelSpectrogram:
    """Log-mel spectrogram, padded/trimmed along time to frame_budget frames."""
    n = len(w.samples)
    frames = max(1, math.ceil(n / HOP))
    padded = np.zeros((frames - 1) * HOP + N_FFT, dtype=np.float64)
    padded[:n] = w.samples
    idx = np.arange(frames)[:, None] * HOP + np.arange(N_FFT)[None, :]
    window = np.hanning(N_FFT + 1)[:-1]
    spec = np.fft.rfft(padded[idx] * window, axis=1)
    power = np.abs(spec) ** 2  # (frames, bins)
    mel_power = power @ mel_filterbank(mels).T  # (frames, mels)
    log_spec = np.log10(np.maximum(mel_power, 1e-10))
    log_spec = np.maximum(log_spec, log_spec.max() - 8.0)
    values = ((log_spec + 4.0) / 4.0).T.astype(np.float32)  # (mels, frames)

    if frame_budget is not None:
        if frames > frame_budget:
            values = values[:, :frame_budget]
        elif frames < frame_budget:
            fill = np.full((mels, frame_budget - frames), values.min(),
                           dtype=np.float32)
            values = np.concatenate([values, fill], axis=1)
    return MelSpectrogram(values=values)


def spec_augment(m: MelSpectrogram, freq_param: int, time_param: int,
                 rng: RngStream) -> MelSpectrogram:
    """One frequency band and one time band masked to the spectrogram minimum."""
    if freq_param > m.mels:
        raise ConfigError(f"freq_param {freq_param} exceeds {m.mels} mel bins")
    if time_param > m.frames:
        raise ConfigError(f"time_param {time_param} exceeds {m.frames} frames")
    gen = rng.generator()
    values = m.values.copy()
    fill = values.min()
    f = int(gen.integers(0, freq_param + 1))
    if f > 0:
        f0 = int(gen.integers(0, m.mels - f + 1))
        values[f0:f0 + f, :] = fill
    t = int(gen.integers(0, time_param + 1))
    if t > 0:
        t0 = int(gen.integers(0, m.frames - t + 1))
        values[:, t0:t0 + t] = fill
    return MelSpectrogram(values=values)


def inject_noise(w: Waveform, snr_db_range: tuple[float, float],
                 rng: RngStream) -> Waveform:
    """Add Gaussian noise at an SNR drawn uniformly from snr_db_range (dB)."""
    power = float(np.mean(w.samples.astype(np.float64) ** 2))
    if power == 0.0:
        return w
    gen = rng.generator()
    snr_db = float(gen.uniform(snr_db_range[0], snr_db_range[1]))
    noise_std = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = gen.normal(0.0, noise_std, size=len(w.samples))
    return Waveform(samples=(w.samples + noise).astype(np.float32),
                    sample_rate=w.sample_rate)
