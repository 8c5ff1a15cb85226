"""Procedurally generated styled toy corpus.

Each utterance renders a short symbol sequence as harmonic "syllables":
per-symbol duration (120 ms times the style's rate, scaled +/-30% by the
symbol id), a pitch contour driven by the style's base F0, slope, and
vibrato, a symbol-dependent harmonic timbre so different symbols are
acoustically distinguishable, and 30 ms silent gaps between syllables.
Style parameters are the hidden ground truth the model must recover from
audio alone; they are kept out of the model-facing records and are only
reachable through :meth:`Manifest.ground_truth`.

On disk a corpus is a directory of WAV files plus a JSON-lines manifest:
a header line ``{"version": .., "sample_rate": .., "seed": .., "config": ..}``
followed by one utterance per line.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import DspConfig, read_wav, write_wav
from .errors import ConfigError, DataError
from .utils import worker_count

MANIFEST_VERSION = 1
ALPHABET = "abcdefghijklmnop"
SYLLABLE_MS = 120.0
GAP_MS = 30.0
PEAK = 0.99

# palette rows: base_f0, f0_slope, rate, vibrato_depth, harmonics
_STYLE_PALETTE = [
    (150.0, -20.0, 1.25, 0.00, 4),
    (230.0, 0.0, 1.00, 0.05, 6),
    (330.0, 35.0, 0.72, 0.09, 8),
    (180.0, 50.0, 1.45, 0.02, 10),
    (280.0, -45.0, 0.85, 0.07, 5),
    (120.0, 15.0, 0.65, 0.04, 7),
]


@dataclass(frozen=True)
class GroundTruthStyle:
    """Latent prosodic factors of one style (evaluation-only knowledge)."""

    id: int
    base_f0: float
    f0_slope: float
    rate: float
    vibrato_depth: float
    harmonics: int

    def __post_init__(self):
        if not 100.0 <= self.base_f0 <= 400.0:
            raise ConfigError(f"style base_f0 {self.base_f0} outside [100, 400] Hz")
        if not 0.6 <= self.rate <= 1.6:
            raise ConfigError(f"style rate {self.rate} outside [0.6, 1.6]")
        if self.harmonics < 1:
            raise ConfigError("style needs at least one harmonic")


def make_styles(k: int) -> list[GroundTruthStyle]:
    """First ``k`` styles from the fixed palette (pairwise distinct)."""
    if not 1 <= k <= len(_STYLE_PALETTE):
        raise ConfigError(f"supported style count is 1..{len(_STYLE_PALETTE)}, got {k}")
    return [GroundTruthStyle(i, *row) for i, row in enumerate(_STYLE_PALETTE[:k])]


def symbols_to_ids(text: str) -> tuple[int, ...]:
    ids = []
    for ch in text:
        pos = ALPHABET.find(ch)
        if pos < 0:
            raise ConfigError(f"symbol {ch!r} not in alphabet {ALPHABET!r}")
        ids.append(pos)
    if not ids:
        raise ConfigError("empty symbol sequence")
    return tuple(ids)


def ids_to_symbols(ids) -> str:
    return "".join(ALPHABET[i] for i in ids)


def _symbol_duration_factor(symbol: int) -> float:
    # deterministic +/-30% spread across the alphabet
    return 1.0 + (-0.3 + 0.6 * symbol / (len(ALPHABET) - 1))


def _symbol_timbre(symbol: int, harmonics: int) -> np.ndarray:
    """Harmonic amplitude profile: 1/k tilt plus a symbol-placed formant bump."""
    k = np.arange(1, harmonics + 1, dtype=np.float64)
    peak = 1.0 + (harmonics - 1) * symbol / (len(ALPHABET) - 1)
    return 1.0 / k + 1.2 * np.exp(-0.5 * (k - peak) ** 2)


def gen_utterance(symbols, style: GroundTruthStyle, seed: int,
                  cfg: DspConfig | None = None) -> np.ndarray:
    """Render a symbol sequence in the given style, deterministically."""
    cfg = cfg or DspConfig()
    symbols = tuple(int(s) for s in symbols)
    if not symbols:
        raise ConfigError("empty symbol sequence")
    if any(s < 0 or s >= len(ALPHABET) for s in symbols):
        raise ConfigError(f"symbol ids must lie in [0, {len(ALPHABET)})")
    sr = cfg.sample_rate
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    gap = np.zeros(int(round(GAP_MS / 1000.0 * sr)))
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)
    pieces = []
    t_start = 0.0
    for pos, s in enumerate(symbols):
        dur = SYLLABLE_MS / 1000.0 * style.rate * _symbol_duration_factor(s)
        n = int(round(dur * sr))
        t = t_start + np.arange(n) / sr
        f0 = (style.base_f0 + style.f0_slope * t) * (
            1.0 + style.vibrato_depth * np.sin(2.0 * np.pi * 5.5 * t + vib_phase))
        f0 = np.clip(f0, 30.0, sr / 2.0 / style.harmonics * 0.9)
        phase = 2.0 * np.pi * np.cumsum(f0) / sr
        weights = _symbol_timbre(s, style.harmonics)
        syl = np.zeros(n)
        for k, w in enumerate(weights, start=1):
            syl += w * np.sin(k * phase)
        attack = max(1, int(0.2 * n))
        decay = max(1, int(0.3 * n))
        env = np.minimum(1.0, np.minimum(np.arange(n) / attack,
                                         (n - 1 - np.arange(n)) / decay))
        amp = rng.uniform(0.85, 1.0)
        pieces.append(syl * np.maximum(env, 0.0) * amp)
        t_start += dur
        if pos != len(symbols) - 1:
            pieces.append(gap)
            t_start += gap.size / sr
    x = np.concatenate(pieces)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (PEAK / peak)
    return x.astype(np.float32)


def exp_decay_ir(t60_s: float, sr: int, seed: int) -> np.ndarray:
    """Synthetic room impulse response: white noise under an exponential
    envelope whose energy falls by 60 dB at ``t60_s``. Unit energy."""
    n = int(round(1.2 * t60_s * sr))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    t = np.arange(n) / sr
    env = np.exp(-math.log(1000.0) * t / t60_s)  # amplitude: -60 dB power at t60
    ir = rng.standard_normal(n) * env
    return ir / np.sqrt(np.sum(ir * ir))


def _fft_convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = x.size + h.size - 1
    nfft = 1 << (n - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)
    return y[:n]


def noisify(x: np.ndarray, snr_db: float, t60_s: float | None = None,
            seed: int = 0, sample_rate: int = 16000) -> np.ndarray:
    """Additive noise at an exact SNR, with optional synthetic reverberation.

    ``snr_db=inf`` is the no-op sentinel and returns the input unchanged.
    The output is peak-normalized to 0.99.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return x
    if not 5.0 <= snr_db <= 25.0:
        raise ConfigError(f"snr_db {snr_db} outside [5, 25]")
    if t60_s is not None and not 0.1 <= t60_s <= 0.9:
        raise ConfigError(f"t60 {t60_s}s outside [0.1, 0.9]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    y = np.asarray(x, dtype=np.float64)
    if t60_s is not None:
        y = _fft_convolve(y, exp_decay_ir(t60_s, sample_rate, seed))[:y.size]
    p_signal = np.mean(y * y)
    noise = rng.standard_normal(y.size)
    target_p_noise = p_signal / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target_p_noise / np.mean(noise * noise))
    y = y + noise
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y * (PEAK / peak)
    return y.astype(np.float32)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Utterance:
    """Model-facing record: carries no style or noise labels."""

    id: str
    symbols: tuple[int, ...]
    wav_path: Path
    split: str


@dataclass
class Manifest:
    version: int
    sample_rate: int
    seed: int
    config: dict
    utterances: list[Utterance]
    _labels: dict

    def split(self, name: str) -> list[Utterance]:
        out = [u for u in self.utterances if u.split == name]
        if not out:
            raise DataError(f"split {name!r} selects no utterances")
        return out

    def ground_truth(self, utt_id: str) -> dict:
        """Hidden labels (style_id, noisy) -- for the analysis module only."""
        return dict(self._labels[utt_id])

    def load_audio(self, utt: Utterance) -> np.ndarray:
        samples, _ = read_wav(utt.wav_path, expected_rate=self.sample_rate)
        return samples


def _apportion_test_counts(group_sizes: list[int], test_fraction: float,
                           total: int) -> list[int]:
    """Largest-remainder split so the test counts sum to round(frac*total)."""
    want_total = int(round(test_fraction * total))
    raw = [test_fraction * g for g in group_sizes]
    counts = [int(math.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    short = want_total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-remainders[i], i))
    for i in order[:max(0, short)]:
        counts[i] += 1
    return [min(c, g) for c, g in zip(counts, group_sizes)]


def gen_corpus(out_dir, n_utts: int, styles: list[GroundTruthStyle],
               noisy_fraction: float, seed: int,
               cfg: DspConfig | None = None,
               length_range: tuple[int, int] = (3, 9),
               test_fraction: float = 0.2) -> Path:
    """Generate WAVs plus manifest; returns the manifest path.

    Styles are drawn uniformly per utterance; exactly
    ``floor(noisy_fraction * n_utts)`` utterances are noisified (reverb plus
    additive noise with SNR uniform in [5, 25] dB and T60 uniform in
    [100, 900] ms); the train/test split is stratified by style.
    """
    cfg = cfg or DspConfig()
    if n_utts < 1:
        raise ConfigError("n_utts must be >= 1")
    if not styles:
        raise ConfigError("at least one style is required")
    if not 0.0 <= noisy_fraction <= 1.0:
        raise ConfigError(f"noisy_fraction {noisy_fraction} outside [0, 1]")
    lo, hi = length_range
    if not 2 <= lo <= hi <= 40:
        raise ConfigError(f"length_range {length_range} outside [2, 40]")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)

    root = np.random.default_rng(np.random.SeedSequence(seed))
    lengths = root.integers(lo, hi + 1, size=n_utts)
    style_ids = root.integers(0, len(styles), size=n_utts)
    symbol_lists = [tuple(int(v) for v in root.integers(0, len(ALPHABET), size=n))
                    for n in lengths]
    noisy_ids = set(root.permutation(n_utts)[:int(math.floor(noisy_fraction * n_utts))])
    snrs = root.uniform(5.0, 25.0, size=n_utts)
    t60s = root.uniform(0.1, 0.9, size=n_utts)
    utt_seeds = root.integers(0, 2 ** 62, size=n_utts)

    # stratified 80/20 (or as configured) split by style
    split = ["train"] * n_utts
    groups = {s.id: [i for i in range(n_utts) if style_ids[i] == s.id] for s in styles}
    sizes = [len(groups[s.id]) for s in styles]
    test_counts = _apportion_test_counts(sizes, test_fraction, n_utts)
    for s, n_test in zip(styles, test_counts):
        members = np.array(groups[s.id])
        picked = root.permutation(members)[:n_test]
        for i in picked:
            split[int(i)] = "test"

    def render(i: int) -> np.ndarray:
        x = gen_utterance(symbol_lists[i], styles[style_ids[i]],
                          seed=int(utt_seeds[i]), cfg=cfg)
        if i in noisy_ids:
            x = noisify(x, float(snrs[i]), float(t60s[i]), seed=int(utt_seeds[i]),
                        sample_rate=cfg.sample_rate)
        return x

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        waves = list(pool.map(render, range(n_utts)))

    rows = []
    for i, x in enumerate(waves):
        utt_id = f"utt{i:05d}"
        rel = f"wav/{utt_id}.wav"
        write_wav(out_dir / rel, x, cfg.sample_rate)
        rows.append({
            "id": utt_id,
            "symbols": ids_to_symbols(symbol_lists[i]),
            "wav": rel,
            "style_id": int(style_ids[i]),
            "noisy": bool(i in noisy_ids),
            "split": split[i],
        })

    header = {
        "version": MANIFEST_VERSION,
        "sample_rate": cfg.sample_rate,
        "seed": seed,
        "config": {
            "n_utts": n_utts,
            "n_styles": len(styles),
            "noisy_fraction": noisy_fraction,
            "length_range": [lo, hi],
            "test_fraction": test_fraction,
        },
    }
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise DataError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        raw_rows = [json.loads(ln) for ln in lines[1:] if ln.strip()]
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON lines: {e}") from e
    if header.get("version") != MANIFEST_VERSION:
        raise DataError(f"manifest version {header.get('version')} unsupported")
    base = path.parent
    utterances = []
    labels = {}
    seen = set()
    for row in raw_rows:
        uid = row["id"]
        if uid in seen:
            raise DataError(f"duplicate utterance id {uid}")
        seen.add(uid)
        wav_path = base / row["wav"]
        if not wav_path.exists():
            raise DataError(f"missing wav file {wav_path}")
        utterances.append(Utterance(id=uid, symbols=symbols_to_ids(row["symbols"]),
                                    wav_path=wav_path, split=row["split"]))
        labels[uid] = {"style_id": row["style_id"], "noisy": row["noisy"]}
    return Manifest(version=header["version"], sample_rate=header["sample_rate"],
                    seed=header["seed"], config=header.get("config", {}),
                    utterances=utterances, _labels=labels)
