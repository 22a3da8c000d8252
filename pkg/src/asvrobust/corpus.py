"""Synthetic speaker corpus: harmonic voices with formant colouring.

Each speaker is a deterministic function of a seed: a fundamental
frequency, a harmonic amplitude pattern, a few formant resonances, a
noisiness level and a characteristic chirp gesture. Each utterance adds
seeded per-utterance variation (random phases, a small pitch jitter,
syllable-like gating with near-silent pauses, fresh gesture timing and
noise), so utterances of one speaker are acoustically close but never
identical. Nothing here is speech, but the corpus keeps the properties
that matter for verification experiments: speakers separable by pitch,
envelope and gesture, and quiet stretches where the signal drops to the
quantisation floor.
"""

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .metrics import Trial
from .seeding import derive_seed
from .wavio import read_wav, write_wav

_FORMANT_BANDWIDTH = 280.0  # Hz
_N_HARMONICS = 10


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    fundamental_freq: float
    harmonic_amplitudes: tuple
    formant_centers: tuple
    noise_level: float
    # characteristic burst gesture: chirps around event_center that sweep
    # by event_sweep Hz over each burst; the main speaker-identity cue
    event_center: float = 1400.0
    event_sweep: float = 0.0

    def __post_init__(self):
        if not 80.0 <= self.fundamental_freq <= 300.0:
            raise ValueError("fundamental_freq outside the 80-300 Hz speech range")
        amps = np.asarray(self.harmonic_amplitudes)
        if amps.size < 4 or np.any(amps < 0) or not np.any(amps > 0):
            raise ValueError("need >= 4 non-negative harmonic amplitudes, not all zero")
        if not 2 <= len(self.formant_centers) <= 3:
            raise ValueError("need 2 or 3 formant centers")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        if not 300.0 <= self.event_center <= 3400.0:
            raise ValueError("event_center outside the audible formant band")
        if abs(self.event_sweep) > 2000.0:
            raise ValueError("event_sweep beyond +-2000 Hz is not voice-like")


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    waveform: np.ndarray
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if np.abs(self.waveform).max() > 1.0:
            raise ValueError("waveform exceeds [-1, 1]")


_COMMON_FORMANT = 1100.0  # Hz, shared across all speakers


def gen_speaker(seed: int, speaker_id=None) -> SpeakerProfile:
    """Draw a speaker's voice parameters from a seeded RNG.

    All speakers share most of their structure: a fundamental from a
    narrow band the mel front-end barely resolves, a common harmonic
    decay, and a resonance near a common frequency. Identity lives in
    one or two extra formants and small harmonic-level deviations. The
    shared structure keeps cross-speaker similarity high and tightly
    packed, which is what makes the verification task non-trivial.
    """
    rng = np.random.default_rng(derive_seed(seed, "speaker"))
    f0 = float(rng.uniform(130.0, 200.0))
    # the fundamental stays the strongest partial: upper harmonics are
    # capped well below it so pitch dominates the spectrum
    decay = 0.45 / np.arange(2, _N_HARMONICS + 1) ** 0.45
    upper = decay * np.exp(rng.uniform(-0.35, 0.35, _N_HARMONICS - 1))
    amps = (1.0,) + tuple(float(a) for a in upper)
    n_own = int(rng.integers(1, 3))
    own = [float(f) for f in rng.uniform(400.0, 1600.0, n_own)]
    shared = _COMMON_FORMANT + float(rng.uniform(-60.0, 60.0))
    formants = tuple(sorted(own + [shared]))
    noise = float(rng.uniform(0.01, 0.04))
    event_center = float(rng.uniform(600.0, 900.0))
    event_sweep = float(rng.uniform(-250.0, 250.0))
    if speaker_id is None:
        speaker_id = f"spk-{seed:x}"
    return SpeakerProfile(
        speaker_id, f0, amps, formants, noise,
        event_center=event_center, event_sweep=event_sweep,
    )


def synth_utterance(
    profile: SpeakerProfile,
    duration: float,
    seed: int,
    sample_rate: int = 8000,
    utterance_id=None,
) -> Utterance:
    """Render one utterance of a speaker at the given duration.

    Deterministic in (profile, duration, seed, sample_rate). The result
    is peak-normalised to 0.5 so there is headroom for perturbations.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    if n < 2:
        raise ValueError("duration too short to synthesise")
    rng = np.random.default_rng(derive_seed(seed, "utterance"))

    jitter = 1.0 + rng.uniform(-0.002, 0.002)
    f0 = profile.fundamental_freq * jitter
    # per-utterance timbre variation: upper harmonics wobble by a few dB
    # and formants drift, so one speaker's utterances spread acoustically;
    # the exp cap keeps the fundamental the dominant partial
    timbre = np.exp(rng.uniform(-0.25, 0.25, len(profile.harmonic_amplitudes)))
    timbre[0] = 1.0
    drift = 1.0 + rng.uniform(-0.06, 0.06, len(profile.formant_centers))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    formants = np.asarray(profile.formant_centers) * drift
    for h, amp in enumerate(profile.harmonic_amplitudes, start=1):
        freq = h * f0
        if freq >= 0.48 * sample_rate:
            break
        phase = rng.uniform(0.0, 2.0 * np.pi)
        if h == 1:
            gain = amp
        else:
            resonance = np.exp(-(((freq - formants) / _FORMANT_BANDWIDTH) ** 2)).max()
            gain = amp * timbre[h - 1] * (0.08 + 0.92 * resonance)
        x += gain * np.sin(2.0 * np.pi * freq * t + phase)

    # the bed only sounds during syllable-like stretches; between them the
    # signal drops to near-silence, as pauses do in speech
    gate = np.zeros(n)
    n_syllables = max(1, int(round(1.5 * duration)))
    for _ in range(n_syllables):
        length = min(rng.uniform(0.15, 0.30), 0.9 * duration)
        ln = max(int(round(length * sample_rate)), 8)
        start = int(rng.uniform(0.0, max(n - ln, 1)))
        stop = min(start + ln, n)
        gate[start:stop] += np.hanning(ln)[: stop - start]
    x *= 0.5 * np.minimum(gate, 1.0)

    # burst gestures: short loud chirps in the speaker's event band carry
    # most of the identity; their timing and exact pitch change with
    # every utterance
    n_events = max(1, int(round(2.5 * duration)))
    for _ in range(n_events):
        length = min(rng.uniform(0.06, 0.12), 0.8 * duration)
        ln = max(int(round(length * sample_rate)), 8)
        start = int(rng.uniform(0.0, max(n - ln, 1)))
        f_start = profile.event_center * (1.0 + rng.uniform(-0.12, 0.12))
        tt = np.arange(min(ln, n - start)) / sample_rate
        sweep = profile.event_sweep
        inst_phase = 2.0 * np.pi * (f_start * tt + 0.5 * sweep * tt * tt / length)
        burst = np.sin(inst_phase + rng.uniform(0.0, 2.0 * np.pi))
        burst *= np.hanning(ln)[: tt.size] * np.exp(rng.uniform(-0.2, 0.2))
        x[start:start + tt.size] += burst

    env_freq = rng.uniform(0.5, 2.5)
    env_phase = rng.uniform(0.0, 2.0 * np.pi)
    x *= 1.0 + 0.25 * np.sin(2.0 * np.pi * env_freq * t + env_phase)
    # breath noise rides the phonation; the pauses keep only a faint
    # dither so they stay near the 16-bit quantisation floor
    rms = np.sqrt(np.mean(x * x))
    x += profile.noise_level * rms * rng.standard_normal(n) * np.minimum(gate, 1.0)
    x += 1.6e-4 * rng.standard_normal(n)
    x *= 0.5 / np.abs(x).max()

    if utterance_id is None:
        utterance_id = f"utt-{seed:x}"
    return Utterance(utterance_id, profile.speaker_id, x, duration)


def build_trials(utterances, n_target: int, n_nontarget: int, seed: int):
    """Sample verification trials without duplicate (enroll, test) pairs.

    Target trials pair two distinct utterances of one speaker; non-target
    trials pair utterances of different speakers. Raises if the corpus
    cannot supply the requested counts.
    """
    ids = [u.utterance_id for u in utterances]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate utterance ids")
    speaker_of = {u.utterance_id: u.speaker_id for u in utterances}
    target_pairs = [
        (a, b)
        for a in ids
        for b in ids
        if a != b and speaker_of[a] == speaker_of[b]
    ]
    nontarget_pairs = [
        (a, b) for a in ids for b in ids if speaker_of[a] != speaker_of[b]
    ]
    if n_target > len(target_pairs):
        raise ValueError(
            f"requested {n_target} target trials, corpus supports {len(target_pairs)}"
        )
    if n_nontarget > len(nontarget_pairs):
        raise ValueError(
            f"requested {n_nontarget} non-target trials, "
            f"corpus supports {len(nontarget_pairs)}"
        )
    rng = np.random.default_rng(derive_seed(seed, "trials"))
    chosen_t = rng.choice(len(target_pairs), size=n_target, replace=False)
    chosen_n = rng.choice(len(nontarget_pairs), size=n_nontarget, replace=False)
    trials = []
    for i, idx in enumerate(chosen_t):
        enroll, test = target_pairs[idx]
        trials.append(Trial(f"t{i:05d}", enroll, test, True))
    for j, idx in enumerate(chosen_n):
        enroll, test = nontarget_pairs[idx]
        trials.append(Trial(f"t{len(chosen_t) + j:05d}", enroll, test, False))
    return trials


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 20
    utterances_per_speaker: int = 10
    duration: float = 2.0
    sample_rate: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("corpus counts must be positive")


@dataclass
class Corpus:
    config: CorpusConfig
    speakers: list
    utterances: list
    utterance_seeds: dict  # utterance_id -> synthesis seed


def generate_corpus(config: CorpusConfig = CorpusConfig()) -> Corpus:
    speakers, utterances, seeds = [], [], {}
    for i in range(config.n_speakers):
        profile = gen_speaker(derive_seed(config.seed, "spk", i), speaker_id=f"s{i:02d}")
        speakers.append(profile)
        for j in range(config.utterances_per_speaker):
            useed = derive_seed(config.seed, "utt", i, j)
            utt = synth_utterance(
                profile,
                config.duration,
                useed,
                config.sample_rate,
                utterance_id=f"s{i:02d}u{j:02d}",
            )
            utterances.append(utt)
            seeds[utt.utterance_id] = useed
    return Corpus(config, speakers, utterances, seeds)


MANIFEST_COLUMNS = ("utterance_id", "speaker_id", "path", "duration", "seed")


def write_corpus(corpus: Corpus, out_dir) -> str:
    """Write WAVs and manifest.csv into out_dir; returns the corpus hash.

    The hash covers the manifest text and every WAV byte, so a rerun
    with the same config proves itself identical by hash alone.
    """
    from pathlib import Path

    out = Path(out_dir)
    (out / "corpus").mkdir(parents=True, exist_ok=True)
    rows = []
    for u in corpus.utterances:
        rel = f"corpus/{u.utterance_id}.wav"
        write_wav(out / rel, u.waveform, corpus.config.sample_rate)
        rows.append(
            [
                u.utterance_id,
                u.speaker_id,
                rel,
                f"{u.duration:.6g}",
                str(corpus.utterance_seeds[u.utterance_id]),
            ]
        )
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return corpus_hash(out)


def corpus_hash(corpus_dir) -> str:
    from pathlib import Path

    out = Path(corpus_dir)
    h = hashlib.sha256()
    h.update((out / "manifest.csv").read_bytes())
    with open(out / "manifest.csv", newline="") as f:
        for row in csv.DictReader(f):
            h.update((out / row["path"]).read_bytes())
    return h.hexdigest()


def load_corpus_dir(corpus_dir):
    """Read manifest.csv + WAVs back; returns (utterances, sample_rate)."""
    from pathlib import Path

    out = Path(corpus_dir)
    manifest = out / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    utterances = []
    rate = None
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{manifest}: unexpected columns {reader.fieldnames}")
        for row in reader:
            wave, r = read_wav(out / row["path"])
            if rate is None:
                rate = r
            elif rate != r:
                raise ValueError(f"{row['path']}: sample rate {r} != {rate}")
            utterances.append(
                Utterance(
                    utterance_id=row["utterance_id"],
                    speaker_id=row["speaker_id"],
                    waveform=wave,
                    duration=float(row["duration"]),
                )
            )
    return utterances, rate
