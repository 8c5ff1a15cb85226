"""DSP pipeline: framing contracts, mel geometry, Griffin-Lim, contours, WAV."""

import numpy as np
import pytest

from styletok.dsp import (DspConfig, extract_f0, frame_energy, frame_signal,
                          griffin_lim, hann_window, istft, log_mel, magnitude,
                          mel_filterbank, read_wav, stft, write_wav)
from styletok.errors import ConfigError, DataError

CFG = DspConfig()


def sine(freq, seconds, sr=16000, amp=0.8):
    t = np.arange(int(seconds * sr)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float64)


# ---------------------------------------------------------------------------
# stft


def test_stft_empty_waveform_errors():
    with pytest.raises(DataError):
        stft(np.array([]), CFG)


def test_stft_zero_input_zero_magnitudes():
    m = magnitude(np.zeros(4000), CFG)
    assert np.all(m == 0.0)


@pytest.mark.parametrize("seconds,expected_t", [
    # T = 1 + floor(len/hop) with reflect padding of win/2 per side
    (0.3, 1 + 4800 // 200),
    (0.5, 1 + 8000 // 200),
    (1.0, 1 + 16000 // 200),
    (2.0, 1 + 32000 // 200),
])
def test_stft_frame_count_formula(seconds, expected_t):
    x = np.random.default_rng(0).standard_normal(int(seconds * CFG.sample_rate))
    assert stft(x, CFG).shape == (expected_t, CFG.n_bins)


def test_stft_short_input_padded_to_one_frame():
    m = magnitude(np.ones(10), CFG)
    assert m.shape[0] >= 1


def test_stft_sine_energy_concentration_matched_grid():
    # window length == n_fft puts an exact-bin sine into exactly bin +/- 1
    cfg = DspConfig(win_ms=64.0, hop_ms=16.0)
    assert cfg.win_length == cfg.n_fft == 1024
    freq = 32 * cfg.sample_rate / cfg.n_fft  # 500 Hz, exact bin 32
    spec = np.abs(stft(sine(freq, 1.0, cfg.sample_rate), cfg)) ** 2
    interior = spec[3:-3]
    total = interior.sum()
    near = interior[:, 31:34].sum()
    assert near / total > 0.999


def test_stft_sine_energy_concentration_default_config():
    # 800-sample window against the 1024 grid smears the mainlobe over
    # ~±2.6 bins; ±4 bins must still hold >=90% (derived numerically)
    freq = 32 * CFG.sample_rate / CFG.n_fft
    spec = np.abs(stft(sine(freq, 1.0), CFG)) ** 2
    interior = spec[3:-3]
    near = interior[:, 28:37].sum()
    assert near / interior.sum() > 0.9


def test_stft_parseval_per_frame_exact():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(8000) * 0.1
    frames = frame_signal(x, CFG)
    w = hann_window(CFG.win_length)
    spec = stft(x, CFG)
    time_energy = np.sum((frames * w) ** 2, axis=1)
    p = np.abs(spec) ** 2
    freq_energy = (p[:, 0] + 2 * p[:, 1:-1].sum(axis=1) + p[:, -1]) / CFG.n_fft
    np.testing.assert_allclose(freq_energy, time_energy, rtol=1e-9)


def test_stft_cola_power_ratio():
    # periodic Hann at 75% overlap: sum_t w^2[n - tH] plateaus at exactly 1.5
    win, hop = CFG.win_length, CFG.hop_length
    w2 = hann_window(win) ** 2
    n = win + 40 * hop
    cola = np.zeros(n)
    for t in range(0, (n - win) // hop + 1):
        cola[t * hop:t * hop + win] += w2
    plateau = cola[win:-win]
    np.testing.assert_allclose(plateau, 1.5, rtol=1e-12)
    # windowed energy over a long signal matches 1.5x time-domain energy to 1%
    rng = np.random.default_rng(2)
    x = rng.standard_normal(10 * CFG.sample_rate) * 0.1
    frames = frame_signal(x, CFG)
    windowed = np.sum((frames * hann_window(win)) ** 2)
    assert abs(windowed / (1.5 * np.sum(x * x)) - 1.0) < 0.01


def test_istft_reconstructs_signal():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(8000) * 0.3
    y = istft(stft(x, CFG), CFG)
    np.testing.assert_allclose(y, x[:y.size], atol=1e-9)


# ---------------------------------------------------------------------------
# log-mel


def test_mel_zero_spectrogram_hits_floor():
    m = log_mel(np.zeros((5, CFG.n_bins)), CFG)
    np.testing.assert_array_equal(m, np.log(1e-5))


def test_mel_rows_sum_to_one():
    fb = mel_filterbank(CFG)
    np.testing.assert_allclose(fb.sum(axis=1), 1.0, rtol=1e-12)
    assert fb.shape == (80, 513)


def test_mel_single_bin_impulse_covers_at_most_two_channels():
    fb = mel_filterbank(CFG)
    mag = np.zeros((1, CFG.n_bins))
    mag[0, 200] = 1.0  # 3125 Hz
    out = log_mel(mag, CFG)
    lit = np.sum(out[0] > np.log(1e-5))
    assert 1 <= lit <= 2
    # and exactly the channels whose filter covers bin 200
    np.testing.assert_array_equal(out[0] > np.log(1e-5), fb[:, 200] > 0)


def test_mel_matches_direct_filterbank_multiply():
    rng = np.random.default_rng(4)
    mag = np.abs(rng.standard_normal((7, CFG.n_bins)))
    fb = mel_filterbank(CFG)
    want = np.log(np.maximum(mag @ fb.T, 1e-5))
    np.testing.assert_array_equal(log_mel(mag, CFG), want)


def test_mel_channel_bandwidth_grows():
    fb = mel_filterbank(CFG)
    widths = (fb > 0).sum(axis=1)
    # mel spacing widens with frequency; allow equality in the cramped low end
    assert widths[-1] > widths[0]
    assert np.all(np.diff(widths) >= -1)


def test_mel_fmax_above_nyquist_errors():
    with pytest.raises(ConfigError):
        mel_filterbank(DspConfig(fmax_hz=9000.0))


# ---------------------------------------------------------------------------
# griffin-lim


def harmonic_tone(seconds=1.0, f0=220.0, sr=16000):
    """Three harmonic bursts with silent gaps, like the corpus syllables."""
    t = np.arange(int(seconds * sr)) / sr

    def burst(freq, start, dur, nh=6):
        y = np.zeros_like(t)
        seg = (t >= start) & (t < start + dur)
        ts = t[seg] - start
        env = np.clip(np.minimum(ts / 0.02, (dur - ts) / 0.05), 0, 1)
        y[seg] = env * sum(np.sin(2 * np.pi * freq * k * ts) / k for k in range(1, nh + 1))
        return y

    x = (burst(f0, 0.05 * seconds, 0.25 * seconds)
         + burst(f0 * 1.18, 0.37 * seconds, 0.25 * seconds)
         + burst(f0 * 0.91, 0.69 * seconds, 0.25 * seconds))
    return 0.6 * x / np.max(np.abs(x))


def test_griffin_lim_converges_on_harmonic_tone():
    mag = magnitude(harmonic_tone(), CFG)
    _, errors = griffin_lim(mag, CFG, iters=60, seed=0)
    assert errors[-1] < 0.1


def test_griffin_lim_error_sequence_non_increasing():
    mag = magnitude(harmonic_tone(), CFG)
    _, errors = griffin_lim(mag, CFG, iters=60, seed=0)
    prev = errors[:-1]
    assert np.all(errors[1:] <= prev + 1e-6 * prev)


def test_griffin_lim_zero_magnitude_is_silence():
    x, errors = griffin_lim(np.zeros((20, CFG.n_bins)), CFG, iters=5, seed=0)
    np.testing.assert_array_equal(x, 0.0)
    np.testing.assert_array_equal(errors, 0.0)


def test_griffin_lim_zero_iters_worse_than_sixty():
    mag = magnitude(harmonic_tone(), CFG)
    _, e0 = griffin_lim(mag, CFG, iters=0, seed=0)
    _, e60 = griffin_lim(mag, CFG, iters=60, seed=0)
    assert e0[-1] > e60[-1]


def test_griffin_lim_rejects_negative_magnitudes():
    bad = np.full((4, CFG.n_bins), -1.0)
    with pytest.raises(DataError):
        griffin_lim(bad, CFG)


def test_griffin_lim_deterministic_given_seed():
    mag = magnitude(harmonic_tone(0.3), CFG)
    x1, _ = griffin_lim(mag, CFG, iters=10, seed=7)
    x2, _ = griffin_lim(mag, CFG, iters=10, seed=7)
    assert x1.tobytes() == x2.tobytes()


# ---------------------------------------------------------------------------
# contours


def test_f0_pure_tone():
    f0 = extract_f0(sine(220.0, 1.0), CFG)
    voiced = f0[~np.isnan(f0)]
    assert voiced.size / f0.size >= 0.95
    assert np.mean(np.abs(voiced - 220.0) <= 2.0) >= 0.95


def test_f0_silence_all_unvoiced():
    f0 = extract_f0(np.zeros(8000), CFG)
    assert np.all(np.isnan(f0))


def test_f0_chirp_monotone_after_median_filter():
    sr = CFG.sample_rate
    seconds = 1.5
    t = np.arange(int(seconds * sr)) / sr
    inst = 150.0 + (300.0 - 150.0) * t / seconds
    phase = 2 * np.pi * np.cumsum(inst) / sr
    x = 0.7 * np.sin(phase)
    f0 = extract_f0(x, CFG)
    v = f0[~np.isnan(f0)]
    k = 5
    med = np.array([np.median(v[max(0, i - k):i + k + 1]) for i in range(v.size)])
    assert np.all(np.diff(med) >= -1e-9)


def test_frame_energy_silence_floor():
    c0 = frame_energy(np.zeros(4000), CFG)
    np.testing.assert_allclose(c0, np.log(1e-10))


def test_frame_energy_amplitude_doubling_adds_log4():
    x = sine(200.0, 0.5, amp=0.2)
    c1 = frame_energy(x, CFG)
    c2 = frame_energy(2 * x, CFG)
    np.testing.assert_allclose(c2 - c1, np.log(4.0), atol=1e-6)


def test_frame_energy_ramp_increases():
    sr = CFG.sample_rate
    t = np.arange(sr) / sr
    x = (0.05 + 0.9 * t) * np.sin(2 * np.pi * 180 * t)
    c0 = frame_energy(x, CFG)
    mid = c0[5:-5]
    assert np.all(np.diff(mid) > 0)


# ---------------------------------------------------------------------------
# wav files


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    x = (rng.uniform(-0.9, 0.9, 5000)).astype(np.float32)
    p = tmp_path / "a.wav"
    write_wav(p, x, 16000)
    y, rate = read_wav(p, expected_rate=16000)
    assert rate == 16000
    np.testing.assert_allclose(y, x, atol=1.0 / 32767)
    # a second write of the read-back samples is bit-stable
    p2 = tmp_path / "b.wav"
    write_wav(p2, y, 16000)
    z, _ = read_wav(p2)
    assert z.tobytes() == y.tobytes()


def test_wav_wrong_rate_rejected(tmp_path):
    p = tmp_path / "c.wav"
    write_wav(p, np.zeros(100, dtype=np.float32), 8000)
    with pytest.raises(DataError, match="sample rate"):
        read_wav(p, expected_rate=16000)


def test_wav_garbage_rejected(tmp_path):
    p = tmp_path / "d.wav"
    p.write_bytes(b"not a wav file at all")
    with pytest.raises(DataError):
        read_wav(p)
