import math

import numpy as np
import pytest
from scipy.io import wavfile

from embdistill.errors import DataError, UsageError
from embdistill.features import (
    WaveClip,
    filter_centers,
    hann,
    hz_to_mel,
    log_mel,
    mel_filterbank,
    read_wav,
    stft_power,
)


def brute_dft_power(frame):
    """O(n^2) DFT power of one windowed frame, no FFT involved."""
    n = len(frame)
    x = frame * np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    re = (x * np.cos(2 * np.pi * k * t / n)).sum(axis=1)
    im = (x * np.sin(2 * np.pi * k * t / n)).sum(axis=1)
    return re**2 + im**2


def test_zero_wave_shape():
    p = stft_power(WaveClip(np.zeros(2048)))
    assert p.shape == (3, 513)
    assert not p.any()


def test_exact_window_gives_one_frame():
    assert stft_power(WaveClip(np.ones(1024))).shape[0] == 1


def test_short_clip_padded_to_one_frame():
    assert stft_power(WaveClip(np.ones(100))).shape == (1, 513)


def test_empty_wave_rejected():
    with pytest.raises(DataError):
        stft_power(WaveClip(np.zeros(0)))


def test_non_power_of_two_window():
    with pytest.raises(UsageError):
        stft_power(WaveClip(np.zeros(2048)), window_len=1000)


@pytest.mark.parametrize("k", [3, 40, 200, 511])
def test_sinusoid_peak_bin(k):
    t = np.arange(4096)
    wave = np.sin(2 * np.pi * k * 32000 / 1024 * t / 32000)
    p = stft_power(WaveClip(wave))
    assert (np.argmax(p, axis=1) == k).all()
    oracle = brute_dft_power(wave[:1024])
    assert np.argmax(oracle) == k
    np.testing.assert_allclose(p[0], oracle, rtol=1e-7, atol=1e-8)


def test_matches_brute_force_dft_on_noise(rng):
    wave = rng.normal(size=1024 + 512)
    p = stft_power(WaveClip(wave))
    for t in range(2):
        np.testing.assert_allclose(p[t], brute_dft_power(wave[t * 512 : t * 512 + 1024]), rtol=1e-7, atol=1e-8)


def test_power_nonnegative(rng):
    assert (stft_power(WaveClip(rng.normal(size=5000))) >= 0).all()


def test_hann_periodic():
    w = hann(8)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)


def test_mel_of_700():
    assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), abs=1e-12)
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)


def test_filterbank_rows():
    fb = mel_filterbank()
    assert fb.shape == (128, 513)
    assert (fb >= 0).all()
    assert (fb.sum(axis=1) > 0).all()
    assert fb.max() <= 1.0


def test_filter_centers_increasing():
    c = filter_centers()
    assert (np.diff(c) > 0).all()
    assert c[0] > 50 and c[-1] < 16000


def test_filterbank_degenerate_range():
    with pytest.raises(UsageError):
        mel_filterbank(f_min=1000, f_max=500)
    with pytest.raises(UsageError):
        mel_filterbank(f_max=20000)
    with pytest.raises(UsageError, match="cover no FFT bin"):
        mel_filterbank(f_min=100, f_max=120)


def test_log_mel_silence():
    spec = log_mel(WaveClip(np.zeros(4096)))
    assert spec.frames.shape == (7, 128)
    np.testing.assert_allclose(spec.frames, math.log(1e-5))
    assert math.log(1e-5) == pytest.approx(-11.5129, abs=1e-4)
    assert spec.frame_rate == 32000 / 512


def test_ten_second_frame_count():
    spec = log_mel(WaveClip(np.zeros(320000)))
    assert spec.frames.shape == (624, 128)


def test_doubling_amplitude():
    t = np.arange(8192)
    wave = 0.4 * np.sin(2 * np.pi * 1000 * t / 32000)
    a = log_mel(WaveClip(wave)).frames
    b = log_mel(WaveClip(2 * wave)).frames
    delta = b - a
    assert (delta <= math.log(4) + 1e-9).all()
    assert (delta >= -1e-12).all()
    loud = a > math.log(1e-5) + 20  # power dominates the floor
    assert loud.any()
    np.testing.assert_allclose(delta[loud], math.log(4), atol=1e-6)


def test_energy_monotone(rng):
    wave = rng.normal(scale=0.1, size=6000)
    a = log_mel(WaveClip(wave)).frames
    b = log_mel(WaveClip(1.7 * wave)).frames
    assert (b >= a).all()


def test_shift_covariance(rng):
    wave = rng.normal(scale=0.3, size=8192)
    a = log_mel(WaveClip(wave)).frames
    b = log_mel(WaveClip(np.concatenate([np.zeros(512), wave]))).frames
    np.testing.assert_allclose(b[1:], a, rtol=1e-6)


def test_read_wav(tmp_path):
    pcm = (np.sin(np.arange(3200) / 5) * 16000).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 32000, pcm)
    clip = read_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(clip.samples, pcm / 32768.0)
    wavfile.write(tmp_path / "f.wav", 32000, np.zeros(100, np.float32))
    assert read_wav(tmp_path / "f.wav").samples.shape == (100,)


def test_read_wav_rejects_stereo_and_rate(tmp_path):
    wavfile.write(tmp_path / "s.wav", 32000, np.zeros((100, 2), np.int16))
    with pytest.raises(DataError, match="mono"):
        read_wav(tmp_path / "s.wav")
    wavfile.write(tmp_path / "r.wav", 16000, np.zeros(100, np.int16))
    with pytest.raises(DataError, match="16000"):
        read_wav(tmp_path / "r.wav")
