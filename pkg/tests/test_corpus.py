"""Synthetic corpus checks: determinism, speaker identity across
utterances (DFT peak-pick oracle), trial sampling and disk round-trip."""

import numpy as np
import pytest

from asvrobust.corpus import (
    Corpus,
    CorpusConfig,
    SpeakerProfile,
    build_trials,
    corpus_hash,
    gen_speaker,
    generate_corpus,
    load_corpus_dir,
    synth_utterance,
    write_corpus,
)
from asvrobust.wavio import read_wav, write_wav


def dominant_peak_hz(waveform, sample_rate, band_hz=400.0):
    """Strongest bin below band_hz; the pitch region, clear of the
    burst events which roam well above it."""
    spectrum = np.abs(np.fft.rfft(waveform))
    n_bins = int(band_hz * len(waveform) / sample_rate)
    return np.argmax(spectrum[:n_bins]) * sample_rate / len(waveform)


class TestSpeakerProfiles:
    def test_deterministic_in_seed(self):
        a, b = gen_speaker(123), gen_speaker(123)
        assert a == b

    def test_distinct_across_seeds(self):
        profiles = [gen_speaker(s) for s in range(1000)]
        f0s = {p.fundamental_freq for p in profiles}
        assert len(f0s) == 1000  # continuous draws never collide

    def test_field_invariants(self):
        for s in range(50):
            p = gen_speaker(s)
            assert 80.0 <= p.fundamental_freq <= 300.0
            amps = np.array(p.harmonic_amplitudes)
            assert amps.size >= 4 and np.all(amps >= 0) and amps.max() > 0
            assert 2 <= len(p.formant_centers) <= 3
            assert p.noise_level > 0

    def test_invalid_profile_rejected(self):
        with pytest.raises(ValueError):
            SpeakerProfile("x", 50.0, (1.0, 0.5, 0.2, 0.1), (500.0, 1500.0), 0.01)
        with pytest.raises(ValueError):
            SpeakerProfile("x", 120.0, (0.0, 0.0, 0.0, 0.0), (500.0, 1500.0), 0.01)


class TestSynthesis:
    def test_deterministic(self):
        p = gen_speaker(7)
        u1 = synth_utterance(p, 1.0, seed=42)
        u2 = synth_utterance(p, 1.0, seed=42)
        np.testing.assert_array_equal(u1.waveform, u2.waveform)

    def test_peak_normalised_with_headroom(self):
        p = gen_speaker(8)
        u = synth_utterance(p, 0.5, seed=1)
        assert np.abs(u.waveform).max() == pytest.approx(0.5, abs=1e-9)

    def test_expected_length(self):
        u = synth_utterance(gen_speaker(9), 2.0, seed=2, sample_rate=8000)
        assert len(u.waveform) == 16000
        assert u.duration == 2.0

    def test_same_speaker_differs_by_seed_but_keeps_pitch(self):
        p = gen_speaker(10)
        u1 = synth_utterance(p, 2.0, seed=100)
        u2 = synth_utterance(p, 2.0, seed=200)
        assert np.abs(u1.waveform - u2.waveform).max() > 0.01
        peak1 = dominant_peak_hz(u1.waveform, 8000)
        peak2 = dominant_peak_hz(u2.waveform, 8000)
        assert abs(peak1 - peak2) <= 2.0
        assert abs(peak1 - p.fundamental_freq) < 5.0

    def test_pitch_tracks_across_many_speakers(self):
        for s in range(20):
            p = gen_speaker(s)
            u1 = synth_utterance(p, 2.0, seed=s * 2)
            u2 = synth_utterance(p, 2.0, seed=s * 2 + 1)
            assert (
                abs(dominant_peak_hz(u1.waveform, 8000) - dominant_peak_hz(u2.waveform, 8000))
                <= 2.0
            )

    def test_bad_duration(self):
        with pytest.raises(ValueError, match="duration"):
            synth_utterance(gen_speaker(11), 0.0, seed=0)
        with pytest.raises(ValueError, match="duration"):
            synth_utterance(gen_speaker(11), -1.0, seed=0)


class TestTrialSampling:
    def _corpus(self):
        return generate_corpus(
            CorpusConfig(n_speakers=5, utterances_per_speaker=4, duration=0.3, seed=3)
        )

    def test_counts_and_typing(self):
        utts = self._corpus().utterances
        trials = build_trials(utts, n_target=30, n_nontarget=40, seed=1)
        assert sum(t.is_target for t in trials) == 30
        assert sum(not t.is_target for t in trials) == 40
        speaker_of = {u.utterance_id: u.speaker_id for u in utts}
        for t in trials:
            assert t.enroll_id != t.test_id
            same = speaker_of[t.enroll_id] == speaker_of[t.test_id]
            assert same == t.is_target

    def test_no_duplicate_pairs(self):
        utts = self._corpus().utterances
        trials = build_trials(utts, 50, 100, seed=2)
        pairs = [(t.enroll_id, t.test_id) for t in trials]
        assert len(set(pairs)) == len(pairs)

    def test_deterministic(self):
        utts = self._corpus().utterances
        t1 = build_trials(utts, 10, 10, seed=5)
        t2 = build_trials(utts, 10, 10, seed=5)
        assert t1 == t2

    def test_overdraw_reports_shortfall(self):
        utts = self._corpus().utterances
        # 5 speakers x 4 utterances: 5 * 4 * 3 = 60 ordered target pairs
        with pytest.raises(ValueError, match="60"):
            build_trials(utts, 61, 10, seed=0)


class TestCorpusGeneration:
    def test_default_shape(self):
        corpus = generate_corpus(CorpusConfig(n_speakers=3, utterances_per_speaker=2, duration=0.4))
        assert len(corpus.speakers) == 3
        assert len(corpus.utterances) == 6
        ids = [u.utterance_id for u in corpus.utterances]
        assert len(set(ids)) == 6

    def test_regeneration_is_identical(self):
        cfg = CorpusConfig(n_speakers=3, utterances_per_speaker=2, duration=0.4, seed=9)
        c1, c2 = generate_corpus(cfg), generate_corpus(cfg)
        for u1, u2 in zip(c1.utterances, c2.utterances):
            np.testing.assert_array_equal(u1.waveform, u2.waveform)

    def test_write_and_reload(self, tmp_path):
        cfg = CorpusConfig(n_speakers=3, utterances_per_speaker=2, duration=0.4, seed=4)
        corpus = generate_corpus(cfg)
        h1 = write_corpus(corpus, tmp_path)
        utts, rate = load_corpus_dir(tmp_path)
        assert rate == 8000
        assert [u.utterance_id for u in utts] == [u.utterance_id for u in corpus.utterances]
        # disk round-trip quantises to 16-bit steps
        for disk, mem in zip(utts, corpus.utterances):
            assert np.abs(disk.waveform - mem.waveform).max() <= 0.5 / 32768.0
        assert h1 == corpus_hash(tmp_path)

    def test_hash_reproducible_across_writes(self, tmp_path):
        cfg = CorpusConfig(n_speakers=2, utterances_per_speaker=2, duration=0.3, seed=6)
        h1 = write_corpus(generate_corpus(cfg), tmp_path / "a")
        h2 = write_corpus(generate_corpus(cfg), tmp_path / "b")
        assert h1 == h2

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_corpus_dir(tmp_path)


class TestWavIO:
    def test_round_trip_exact_on_quantised_values(self, tmp_path):
        rng = np.random.default_rng(51)
        x = np.round(rng.uniform(-0.9, 0.9, 400) * 32768.0) / 32768.0
        path = tmp_path / "x.wav"
        write_wav(path, x, 8000)
        back, rate = read_wav(path)
        assert rate == 8000
        np.testing.assert_array_equal(back, x)

    def test_quantisation_error_bounded(self, tmp_path):
        rng = np.random.default_rng(52)
        x = rng.uniform(-0.99, 0.99, 300)
        path = tmp_path / "y.wav"
        write_wav(path, x, 8000)
        back, _ = read_wav(path)
        assert np.abs(back - x).max() <= 0.5 / 32768.0 + 1e-12
