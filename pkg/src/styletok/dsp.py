"""Audio <-> spectrogram pipeline.

Audio is a mono float array in [-1, 1] at a fixed sample rate (16 kHz by
default). Analysis uses 50 ms frames hopped every 12.5 ms, a periodic Hann
window, and a 1024-point transform; mel features are 80 triangular filters
spanning 40-7600 Hz applied to linear magnitudes, floored at 1e-5 before the
natural log. Griffin-Lim reconstructs phase by alternating projections from
a seeded random-phase start.

WAV files are RIFF PCM, 16-bit signed little-endian, mono. A file whose
sample rate differs from the configured one is an error; there is no
resampling.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

MEL_BREAK_HZ = 700.0
MEL_SCALE = 2595.0


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_ms: float = 50.0
    hop_ms: float = 12.5
    n_mels: int = 80
    fmin_hz: float = 40.0
    fmax_hz: float = 7600.0
    mel_floor: float = 1e-5
    griffin_lim_iters: int = 60

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class ProsodyContours:
    """Per-frame F0 (NaN where unvoiced) and log frame energy."""

    f0_hz: np.ndarray
    c0: np.ndarray

    def voiced(self) -> np.ndarray:
        return ~np.isnan(self.f0_hz)


def hann_window(n: int) -> np.ndarray:
    # periodic form: sums to a constant at 75% overlap
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def frame_signal(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Reflect-padded overlapping frames ``[T, win_length]``.

    Input shorter than one frame is zero-padded up to one frame; an empty
    input is an error.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("empty waveform")
    win, hop = cfg.win_length, cfg.hop_length
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    half = win // 2
    x = np.pad(x, half, mode="reflect")
    n_frames = 1 + (x.size - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    return frames


def stft(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Complex short-time spectrum, shape ``[T, n_fft/2 + 1]``."""
    frames = frame_signal(x, cfg)
    return np.fft.rfft(frames * hann_window(cfg.win_length), n=cfg.n_fft, axis=1)


def magnitude(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Linear magnitude spectrogram ``[T, n_bins]``."""
    return np.abs(stft(x, cfg))


def istft(spec: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft` (reflect pad trimmed)."""
    win, hop = cfg.win_length, cfg.hop_length
    w = hann_window(win)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :win] * w
    n = (spec.shape[0] - 1) * hop + win
    x = np.zeros(n)
    wsum = np.zeros(n)
    for t in range(spec.shape[0]):
        x[t * hop:t * hop + win] += frames[t]
        wsum[t * hop:t * hop + win] += w * w
    x = x / np.maximum(wsum, 1e-10)
    half = win // 2
    return x[half:n - half]


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular mel filters ``[n_mels, n_bins]``, each row summing to 1."""
    if cfg.fmax_hz > cfg.sample_rate / 2:
        raise ConfigError(
            f"mel fmax {cfg.fmax_hz} Hz above Nyquist {cfg.sample_rate / 2} Hz")

    def to_mel(f):
        return MEL_SCALE * np.log10(1.0 + f / MEL_BREAK_HZ)

    def to_hz(m):
        return MEL_BREAK_HZ * (10.0 ** (m / MEL_SCALE) - 1.0)

    edges_hz = to_hz(np.linspace(to_mel(cfg.fmin_hz), to_mel(cfg.fmax_hz),
                                 cfg.n_mels + 2))
    bin_hz = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, cfg.n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        total = fb[m].sum()
        if total <= 0:
            raise ConfigError(
                f"mel channel {m} covers no FFT bin; raise n_fft or widen the band")
        fb[m] /= total
    return fb


def log_mel(mag: np.ndarray, cfg: DspConfig, fb: np.ndarray | None = None) -> np.ndarray:
    """80-channel log-mel features from a linear magnitude spectrogram."""
    if np.any(mag < 0):
        raise DataError("magnitude spectrogram has negative values")
    if fb is None:
        fb = mel_filterbank(cfg)
    return np.log(np.maximum(mag @ fb.T, cfg.mel_floor))


def mel_spectrogram(x: np.ndarray, cfg: DspConfig, fb: np.ndarray | None = None) -> np.ndarray:
    return log_mel(magnitude(x, cfg), cfg, fb)


def griffin_lim(mag: np.ndarray, cfg: DspConfig, iters: int | None = None,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Phase reconstruction by alternating projections.

    Starts from seeded random phase and returns ``(samples, errors)`` where
    ``errors[k]`` is the spectral-convergence error after ``k`` phase
    updates (so ``errors[0]`` measures the plain random-phase inversion).

    The iteration runs on the padded signal with plain framing, so analysis
    and weighted-overlap-add synthesis are exact adjoints and the error is
    non-increasing; the boundary padding is trimmed only from the returned
    samples.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise DataError("griffin-lim needs non-negative magnitudes")
    if iters is None:
        iters = cfg.griffin_lim_iters
    win, hop, n_fft = cfg.win_length, cfg.hop_length, cfg.n_fft
    w = hann_window(win)
    n_frames = mag.shape[0]
    n = (n_frames - 1) * hop + win
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    wsum = np.zeros(n)
    for t in range(n_frames):
        wsum[t * hop:t * hop + win] += w * w
    wsum = np.maximum(wsum, 1e-10)

    def analyze(x):
        return np.fft.rfft(x[idx] * w, n=n_fft, axis=1)

    def synthesize(spec):
        frames = np.fft.irfft(spec, n=n_fft, axis=1)[:, :win] * w
        x = np.zeros(n)
        for t in range(n_frames):
            x[t * hop:t * hop + win] += frames[t]
        return x / wsum

    rng = np.random.default_rng(seed)
    norm = np.linalg.norm(mag)
    x = synthesize(mag * np.exp(2j * np.pi * rng.random(mag.shape)))
    errors = np.empty(iters + 1)
    for k in range(iters + 1):
        spec = analyze(x)
        errors[k] = np.linalg.norm(np.abs(spec) - mag) / norm if norm > 0 else 0.0
        if k == iters:
            break
        x = synthesize(mag * np.exp(1j * np.angle(spec)))
    half = win // 2
    return x[half:n - half].astype(np.float32), errors


def extract_f0(x: np.ndarray, cfg: DspConfig, fmin: float = 50.0,
               fmax: float = 600.0, voicing_threshold: float = 0.3) -> np.ndarray:
    """Per-frame F0 from the normalized autocorrelation peak; NaN = unvoiced."""
    frames = frame_signal(x, cfg)
    sr = cfg.sample_rate
    lag_min = int(np.floor(sr / fmax))
    lag_max = int(np.ceil(sr / fmin))
    lag_max = min(lag_max, frames.shape[1] - 2)
    # autocorrelation via FFT, one batch for all frames
    n = int(2 ** np.ceil(np.log2(2 * frames.shape[1])))
    spec = np.fft.rfft(frames, n=n, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), n=n, axis=1)[:, :lag_max + 2]
    out = np.full(frames.shape[0], np.nan)
    for t in range(frames.shape[0]):
        r0 = ac[t, 0]
        if r0 < 1e-9:
            continue
        band = ac[t, lag_min:lag_max + 1] / r0
        k = int(np.argmax(band))
        if band[k] < voicing_threshold:
            continue
        lag = lag_min + k
        # parabolic refinement around the peak
        if 0 < lag < ac.shape[1] - 1:
            y0, y1, y2 = ac[t, lag - 1] / r0, band[k], ac[t, lag + 1] / r0
            denom = y0 - 2 * y1 + y2
            if abs(denom) > 1e-12:
                lag = lag + 0.5 * (y0 - y2) / denom
        f0 = sr / lag
        if fmin <= f0 <= fmax:
            out[t] = f0
    return out


def frame_energy(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Per-frame log energy: log(sum of squares + 1e-10)."""
    frames = frame_signal(x, cfg)
    return np.log(np.sum(frames * frames, axis=1) + 1e-10)


def prosody_contours(x: np.ndarray, cfg: DspConfig) -> ProsodyContours:
    return ProsodyContours(f0_hz=extract_f0(x, cfg), c0=frame_energy(x, cfg))


# ---------------------------------------------------------------------------
# WAV files


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
            rate = f.getframerate()
            if expected_rate is not None and rate != expected_rate:
                raise DataError(
                    f"{path}: sample rate {rate} != configured {expected_rate} "
                    "(resampling is unsupported)")
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise DataError(f"{path}: not a readable RIFF PCM file ({e})") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return samples, rate
