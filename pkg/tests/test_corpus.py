"""Corpus generation: determinism, durations, noise levels, manifest format."""

import json
import math

import numpy as np
import pytest

from styletok.corpus import (ALPHABET, GroundTruthStyle, Manifest, Utterance,
                             exp_decay_ir, gen_corpus, gen_utterance,
                             ids_to_symbols, load_manifest, make_styles,
                             noisify, symbols_to_ids)
from styletok.dsp import DspConfig, extract_f0
from styletok.errors import ConfigError, DataError

CFG = DspConfig()


def test_make_styles_within_ranges_and_distinct():
    styles = make_styles(6)
    for s in styles:
        assert 100 <= s.base_f0 <= 400
        assert 0.6 <= s.rate <= 1.6
    for a in styles:
        for b in styles:
            if a.id == b.id:
                continue
            differing = sum(getattr(a, f) != getattr(b, f)
                            for f in ("base_f0", "f0_slope", "rate",
                                      "vibrato_depth", "harmonics"))
            assert differing >= 2, f"styles {a.id}/{b.id} differ in < 2 fields"


def test_style_validation():
    with pytest.raises(ConfigError):
        GroundTruthStyle(0, base_f0=50.0, f0_slope=0, rate=1.0,
                         vibrato_depth=0, harmonics=3)
    with pytest.raises(ConfigError):
        GroundTruthStyle(0, base_f0=200.0, f0_slope=0, rate=2.0,
                         vibrato_depth=0, harmonics=3)


def test_symbol_round_trip():
    ids = symbols_to_ids("adop")
    assert ids == (0, 3, 14, 15)
    assert ids_to_symbols(ids) == "adop"
    with pytest.raises(ConfigError):
        symbols_to_ids("xyz!")
    with pytest.raises(ConfigError):
        symbols_to_ids("")


def test_single_symbol_duration_range():
    # 120 ms * rate 1.0 * (1 +/- 0.3); one symbol has no gap
    style = GroundTruthStyle(0, 200.0, 0.0, 1.0, 0.0, 4)
    for sym in (0, 7, 15):
        x = gen_utterance([sym], style, seed=1, cfg=CFG)
        dur = x.size / CFG.sample_rate
        assert 0.084 - 0.002 <= dur <= 0.156 + 0.002


def test_gen_utterance_deterministic():
    style = make_styles(3)[1]
    a = gen_utterance([1, 5, 9], style, seed=77, cfg=CFG)
    b = gen_utterance([1, 5, 9], style, seed=77, cfg=CFG)
    assert a.tobytes() == b.tobytes()
    c = gen_utterance([1, 5, 9], style, seed=78, cfg=CFG)
    assert a.tobytes() != c.tobytes()


def test_gen_utterance_peak_normalized():
    x = gen_utterance(list(range(8)), make_styles(2)[0], seed=3, cfg=CFG)
    assert np.max(np.abs(x)) <= 0.99 + 1e-6


def test_gen_utterance_empty_symbols_rejected():
    with pytest.raises(ConfigError):
        gen_utterance([], make_styles(1)[0], seed=0, cfg=CFG)


def test_low_vs_high_pitch_styles_separate_in_f0():
    lo = GroundTruthStyle(0, 150.0, 0.0, 1.0, 0.0, 5)
    hi = GroundTruthStyle(1, 300.0, 0.0, 1.0, 0.0, 5)
    syms = [2, 8, 11, 4]
    f0_lo = extract_f0(gen_utterance(syms, lo, seed=5, cfg=CFG), CFG)
    f0_hi = extract_f0(gen_utterance(syms, hi, seed=5, cfg=CFG), CFG)
    med_lo = np.nanmedian(f0_lo)
    med_hi = np.nanmedian(f0_hi)
    assert med_hi - med_lo >= 100.0


# ---------------------------------------------------------------------------
# noisify


def test_noisify_hits_requested_snr():
    x = gen_utterance([3, 6, 9], make_styles(1)[0], seed=2, cfg=CFG)
    for snr in (5.0, 10.0, 25.0):
        y = noisify(x, snr, t60_s=None, seed=9)
        # recover the noise by scale-matching the clean signal (output is
        # peak-renormalized, so project out the signal first)
        scale = np.dot(y, x) / np.dot(x, x)
        noise = y - scale * x
        got = 10 * np.log10(np.sum((scale * x) ** 2) / np.sum(noise ** 2))
        assert abs(got - snr) <= 0.1


def test_noisify_infinite_snr_is_noop():
    x = gen_utterance([1, 2], make_styles(1)[0], seed=4, cfg=CFG)
    y = noisify(x, math.inf, t60_s=None, seed=0)
    assert y is x


def test_noisify_rejects_out_of_range():
    x = np.zeros(100, dtype=np.float32) + 0.1
    with pytest.raises(ConfigError):
        noisify(x, 3.0)
    with pytest.raises(ConfigError):
        noisify(x, 30.0)
    with pytest.raises(ConfigError):
        noisify(x, 10.0, t60_s=1.5)


def test_exp_decay_ir_t60():
    sr = 16000
    for t60 in (0.1, 0.3, 0.9):
        ir = exp_decay_ir(t60, sr, seed=5)
        # fit the energy decay with a sliding window; -60 dB crossing ~ t60
        w = max(1, sr // 100)
        e = np.convolve(ir * ir, np.ones(w), mode="same")
        e0 = e[:w].mean()
        below = np.nonzero(e < e0 * 1e-6)[0]
        assert below.size > 0
        t_cross = below[0] / sr
        assert abs(t_cross - t60) <= 0.1 * t60 + w / sr


# ---------------------------------------------------------------------------
# corpus + manifest


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    path = gen_corpus(out, n_utts=40, styles=make_styles(3), noisy_fraction=0.5,
                      seed=123, cfg=CFG, length_range=(2, 5))
    return path


def test_gen_corpus_counts_and_split(small_corpus):
    man = load_manifest(small_corpus)
    assert len(man.utterances) == 40
    noisy = sum(man.ground_truth(u.id)["noisy"] for u in man.utterances)
    assert noisy == 20  # floor(0.5 * 40)
    test = [u for u in man.utterances if u.split == "test"]
    assert len(test) == 8  # round(0.2 * 40)
    styles_seen = {man.ground_truth(u.id)["style_id"] for u in man.utterances}
    assert styles_seen == {0, 1, 2}


def test_gen_corpus_zero_noise(tmp_path):
    path = gen_corpus(tmp_path, n_utts=10, styles=make_styles(2), noisy_fraction=0.0,
                      seed=5, cfg=CFG, length_range=(2, 3))
    man = load_manifest(path)
    assert not any(man.ground_truth(u.id)["noisy"] for u in man.utterances)


def test_gen_corpus_reproducible(tmp_path):
    p1 = gen_corpus(tmp_path / "a", n_utts=12, styles=make_styles(2),
                    noisy_fraction=0.25, seed=9, cfg=CFG, length_range=(2, 4))
    p2 = gen_corpus(tmp_path / "b", n_utts=12, styles=make_styles(2),
                    noisy_fraction=0.25, seed=9, cfg=CFG, length_range=(2, 4))
    assert p1.read_text() == p2.read_text()
    m1, m2 = load_manifest(p1), load_manifest(p2)
    for u1, u2 in zip(m1.utterances, m2.utterances):
        assert u1.wav_path.read_bytes() == u2.wav_path.read_bytes()


def test_style_histogram_uniform():
    # style draw is uniform; check a 3-sigma multinomial bound without audio
    rng = np.random.default_rng(np.random.SeedSequence(321))
    n, k = 3000, 3
    rng.integers(2, 6, size=n)  # lengths drawn first, same order as gen_corpus
    draws = rng.integers(0, k, size=n)
    counts = np.bincount(draws, minlength=k)
    p = 1.0 / k
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_manifest_round_trip(small_corpus):
    man = load_manifest(small_corpus)
    again = load_manifest(small_corpus)
    assert [u.id for u in man.utterances] == [u.id for u in again.utterances]
    u = man.utterances[0]
    assert man.load_audio(u).tobytes() == again.load_audio(again.utterances[0]).tobytes()


def test_model_facing_records_hide_labels(small_corpus):
    man = load_manifest(small_corpus)
    u = man.utterances[0]
    assert isinstance(u, Utterance)
    assert not hasattr(u, "style_id")
    assert not hasattr(u, "noisy")
    assert set(Utterance.__dataclass_fields__) == {"id", "symbols", "wav_path", "split"}


def test_manifest_errors(tmp_path, small_corpus):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    with pytest.raises(DataError):
        load_manifest(bad)
    # duplicate id (manifest placed next to the real wavs so paths resolve)
    lines = small_corpus.read_text().splitlines()
    dup = small_corpus.parent / "dup.jsonl"
    dup.write_text("\n".join([lines[0], lines[1], lines[1]]) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(dup)
    # missing wav
    row = json.loads(lines[1])
    row["wav"] = "wav/nope.wav"
    miss = small_corpus.parent / "miss.jsonl"
    miss.write_text(lines[0] + "\n" + json.dumps(row) + "\n")
    with pytest.raises(DataError, match="missing wav file"):
        load_manifest(miss)


def test_split_accessor(small_corpus):
    man = load_manifest(small_corpus)
    assert len(man.split("train")) + len(man.split("test")) == 40
    with pytest.raises(DataError):
        man.split("validation")
