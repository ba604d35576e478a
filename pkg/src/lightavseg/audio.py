"""Waveform handling and the log-mel frontend.

The frontend follows the 96x64 one-second-window convention: audio is
resampled to 16 kHz mono, split into one-second segments (one per visual
frame), and each segment becomes 96 Hann-windowed STFT frames (25 ms window,
10 ms hop) reduced by a 64-band triangular mel filterbank spanning
125-7500 Hz, then log-compressed with a 1e-10 floor.

The 512-point real FFT is implemented in-repo (iterative radix-2, vectorized
over the frame axis) and is verified against a brute-force DFT in the tests.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DimensionError, RngState, Tensor

SAMPLE_RATE = 16000
WIN_SAMPLES = 400      # 25 ms
HOP_SAMPLES = 160      # 10 ms
N_FFT = 512
N_MELS = 64
FRAMES_PER_WINDOW = 96
MEL_FMIN = 125.0
MEL_FMAX = 7500.0
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono PCM samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DimensionError(f"waveform must be 1D, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.size and np.abs(self.samples).max() > 1.0 + 1e-6:
            raise ContractError("waveform samples exceed [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class Spectrogram:
    """Per-clip log-mel features: T one-second windows of 96 frames x 64 bins."""

    windows: Tensor            # (T, 96, 64)
    padded: bool = False       # true when the tail needed zero padding

    def __post_init__(self):
        if self.windows.ndim != 3 or self.windows.shape[1:] != (FRAMES_PER_WINDOW, N_MELS):
            raise DimensionError(
                f"spectrogram must be (T, {FRAMES_PER_WINDOW}, {N_MELS}), "
                f"got {self.windows.shape}")

    @property
    def num_windows(self) -> int:
        return self.windows.shape[0]


# ---------------------------------------------------------------------------
# FFT (in-repo radix-2)
# ---------------------------------------------------------------------------

def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT over the last axis (length must be a power of two)."""
    n = x.shape[-1]
    if n & (n - 1) or n == 0:
        raise ContractError(f"FFT length must be a power of two, got {n}")
    a = np.asarray(x, dtype=np.complex128)[..., _bit_reverse_indices(n)]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def rfft_power(frames: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    """Power spectrum |FFT|^2 of real frames, bins 0..n_fft/2."""
    if frames.shape[-1] > n_fft:
        raise ContractError(f"frame length {frames.shape[-1]} exceeds FFT size {n_fft}")
    padded = np.zeros(frames.shape[:-1] + (n_fft,))
    padded[..., :frames.shape[-1]] = frames
    spec = fft_radix2(padded)[..., :n_fft // 2 + 1]
    return (spec.real ** 2 + spec.imag ** 2)


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular filters (n_mels, n_fft//2+1), mel-spaced between fmin and fmax."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for k in range(n_mels):
        left, center, right = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        up = (bin_hz - left) / (center - left)
        down = (right - bin_hz) / (right - center)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_filter_centers(n_mels: int = N_MELS, fmin: float = MEL_FMIN,
                       fmax: float = MEL_FMAX) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges_hz[1:-1]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def resample_to_16k(w: Waveform) -> Waveform:
    """Linear-interpolation resampling to 16 kHz."""
    if w.samples.size == 0:
        raise ContractError("cannot resample an empty waveform")
    if w.sample_rate_hz < 8000:
        raise ContractError(f"source rate must be >= 8000 Hz, got {w.sample_rate_hz}")
    if w.sample_rate_hz == SAMPLE_RATE:
        return Waveform(w.samples.copy(), SAMPLE_RATE)
    n_out = int(round(w.samples.size * SAMPLE_RATE / w.sample_rate_hz))
    src_pos = np.arange(n_out) * (w.sample_rate_hz / SAMPLE_RATE)
    out = np.interp(src_pos, np.arange(w.samples.size), w.samples)
    return Waveform(out, SAMPLE_RATE)


_HANN = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN_SAMPLES) / WIN_SAMPLES)
_MEL_FB = mel_filterbank()


def log_mel(w: Waveform) -> Spectrogram:
    """Log-mel features, one 96x64 window per second of 16 kHz audio.

    Audio shorter than a whole number of seconds is zero-padded to the next
    second boundary and the spectrogram is flagged as padded.
    """
    if w.sample_rate_hz != SAMPLE_RATE:
        raise ContractError(
            f"log_mel expects {SAMPLE_RATE} Hz input, got {w.sample_rate_hz} "
            "(resample first)")
    if w.samples.size == 0:
        raise ContractError("cannot compute a spectrogram of an empty waveform")
    n_windows = max(1, math.ceil(w.samples.size / SAMPLE_RATE))
    needed = n_windows * SAMPLE_RATE
    padded = needed > w.samples.size
    samples = w.samples
    if padded:
        samples = np.concatenate([samples, np.zeros(needed - samples.size)])

    segments = samples.reshape(n_windows, SAMPLE_RATE)
    # 96 frames of 400 samples at hop 160 cover the first 0.96 s of each second
    offsets = np.arange(FRAMES_PER_WINDOW) * HOP_SAMPLES
    idx = offsets[:, None] + np.arange(WIN_SAMPLES)[None, :]
    frames = segments[:, idx] * _HANN            # (T, 96, 400)
    power = rfft_power(frames)                   # (T, 96, 257)
    mel = power @ _MEL_FB.T                      # (T, 96, 64)
    return Spectrogram(Tensor(np.log(mel + LOG_FLOOR)), padded=padded)


def synth_tone(freq_hz: float, duration_s: float, amplitude: float,
               rng: RngState | None = None, snr_db: float | None = None) -> Waveform:
    """Pure sine at 16 kHz, optionally with seeded Gaussian noise at snr_db."""
    if not 0.0 < freq_hz < 8000.0:
        raise ContractError(f"tone frequency must be in (0, 8000) Hz, got {freq_hz}")
    if amplitude > 1.0:
        raise ContractError(f"amplitude must be <= 1, got {amplitude}")
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    samples = amplitude * np.sin(2.0 * np.pi * freq_hz * t)
    if snr_db is not None:
        if rng is None:
            raise ContractError("noise requested without an RngState")
        signal_power = amplitude ** 2 / 2.0
        noise_std = math.sqrt(signal_power / (10.0 ** (snr_db / 10.0)))
        samples = samples + rng.normal((n,), std=noise_std)
        peak = np.abs(samples).max()
        if peak > 1.0:
            samples = samples / peak
    return Waveform(samples, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """16-bit little-endian PCM WAV; stereo is averaged to mono."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ContractError(f"{path}: only 16-bit PCM WAV supported, "
                                f"got sample width {f.getsampwidth()}")
        n_channels = f.getnchannels()
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return Waveform(data, rate)


def write_wav(path, w: Waveform):
    # symmetric 1/32768 quantization so read_wav inverts it exactly
    data = np.clip(w.samples, -1.0, 1.0)
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


LMEL_MAGIC = b"LMEL"


def write_lmel(path, spec: Spectrogram):
    """Flat binary spectrogram: magic 'LMEL', u32 T, then T*96*64 LE f32."""
    with open(path, "wb") as f:
        f.write(LMEL_MAGIC)
        f.write(struct.pack("<I", spec.num_windows))
        f.write(spec.windows.data.astype("<f4").tobytes())


def read_lmel(path) -> Spectrogram:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != LMEL_MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}, expected {LMEL_MAGIC!r}")
        (t,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(t * FRAMES_PER_WINDOW * N_MELS * 4), dtype="<f4")
    if data.size != t * FRAMES_PER_WINDOW * N_MELS:
        raise ContractError(f"{path}: truncated LMEL payload")
    return Spectrogram(Tensor(data.astype(np.float64)
                              .reshape(t, FRAMES_PER_WINDOW, N_MELS)))
