"""Log-mel frontend: 32 kHz input, 1024-sample Hann window, 512 hop, 128 HTK mel bins."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

SAMPLE_RATE = 32000
WINDOW_LEN = 1024  # 32 ms at 32 kHz
HOP = 512  # 16 ms
N_MELS = 128
F_MIN = 50.0
F_MAX = 16000.0
EPS_FLOOR = 1e-5


@dataclass
class WaveClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")


@dataclass
class LogMelSpec:
    frames: np.ndarray  # T x n_mels
    frame_rate: float


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the STFT convention)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(wave: WaveClip, window_len: int = WINDOW_LEN, hop: int = HOP) -> np.ndarray:
    """Power spectrogram, shape ``T x (window_len // 2 + 1)``.

    Frames start at sample 0 with no centering. A clip shorter than one
    window is zero-padded to exactly one frame.
    """
    if window_len <= 0 or window_len & (window_len - 1):
        raise UsageError(f"window_len must be a power of two, got {window_len}")
    if hop <= 0:
        raise UsageError(f"hop must be positive, got {hop}")
    x = wave.samples
    if x.size == 0:
        raise DataError("empty waveform")
    if x.size < window_len:
        x = np.pad(x, (0, window_len - x.size))
    n_frames = 1 + (x.size - window_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann(window_len), axis=1)
    return spec.real**2 + spec.imag**2


def mel_filterbank(
    n_bins: int = N_MELS,
    fft_bins: int = WINDOW_LEN // 2 + 1,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Unit-peak triangular filters, shape ``n_bins x fft_bins``."""
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise UsageError(
            f"need 0 <= f_min < f_max <= sample_rate/2, got {f_min}, {f_max}, {sample_rate}"
        )
    n_fft = 2 * (fft_bins - 1)
    freqs = np.arange(fft_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bins + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (center - lo)
    down = (hi - freqs[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise UsageError(
            f"mel filters {empty.tolist()} cover no FFT bin; frequency range too narrow"
        )
    return fb


def filter_centers(n_bins=N_MELS, f_min=F_MIN, f_max=F_MAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bins + 2))[1:-1]


_FB_CACHE: dict[tuple, np.ndarray] = {}


def log_mel(
    wave: WaveClip,
    window_len: int = WINDOW_LEN,
    hop: int = HOP,
    n_mels: int = N_MELS,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
    eps_floor: float = EPS_FLOOR,
) -> LogMelSpec:
    power = stft_power(wave, window_len, hop)
    key = (n_mels, power.shape[1], f_min, f_max, wave.sample_rate)
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = _FB_CACHE.setdefault(key, mel_filterbank(*key))
    return LogMelSpec(np.log(power @ fb.T + eps_floor), wave.sample_rate / hop)


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> WaveClip:
    """Load a mono 16-bit PCM or 32-bit float WAV at ``expected_rate``.

    Resampling and downmixing are deliberately not done here.
    """
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    return WaveClip(samples, rate)
