"""End-to-end experiment runner: one JSON config drives corpus synthesis,
training, and the attack x defense evaluation grids.

Config grammar (JSON object; every key optional, unknown keys rejected):

    {
      "seed": 0,
      "out_dir": "workspace",
      "corpus":  {"n_speakers": 20, "utterances_per_speaker": 10,
                  "duration": 2.0, "sample_rate": 8000},
      "feature": {"sample_rate": 8000, "win_length": 200, "hop_length": 80,
                  "n_fft": 256, "n_mels": 24, "log_floor": 2e-07},
      "train":   {"epochs": 50, "batch_size": 32, "learning_rate": 0.001,
                  "lr_decay": 1.0, "lr_decay_every": 2, ...},
      "n_target_trials": 300, "n_nontarget_trials": 300,
      "dev_fraction": 0.6666666666666666,
      "attack":  {"epsilon_grid": [1, 5, 10], "n_iters": 5},
      "defense": {"sigma_grid": [1, 15, 30, 60, 90, 120], "k_votes": 50,
                  "filters": [{"kind": "gaussian", "kernel_size": 3,
                               "gaussian_std": 0.6},
                              {"kind": "mean"}, {"kind": "median"}]},
      "sweep_votes": {"epsilon": 5, "n_iters": 5, "sigma": 60,
                      "k_grid": [0, 1, 2, 5, 10, 20, 50]},
      "sweep_iters": {"epsilon": 5, "sigma": 60, "k_votes": 5,
                      "n_grid": [1, 5, 10, 20, 40]},
      "export_adversarial": false
    }

The defaults above ARE the "paper-preset" grid; an empty config file, a
missing --config flag, or that literal name all resolve to them. CLI
flags override config values, which override preset defaults.

The top-level seed is the only randomness knob: corpus synthesis,
trial sampling, the dev/eval split, training, per-trial defense noise
and per-trial attacker noise all derive independent streams from it.
For that reason "seed" is rejected inside the corpus/train sections.

Every run function is a pure function of (config, files under out_dir):
rerunning one with the same inputs rewrites byte-identical outputs,
except for the wall_time report column, which the --no-timing flag
blanks for byte-for-byte comparisons. Trials inside a grid cell are
independent, so worker threads only change scheduling, never results.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .attack import AttackConfig, bim, bim_adaptive_vs_voting, write_adversarial_wavs
from .corpus import (
    CorpusConfig,
    build_trials,
    generate_corpus,
    load_corpus_dir,
    write_corpus,
)
from .defense import (
    DEFAULT_FILTERS,
    DEFAULT_K_VOTES,
    SIGMA_SWEEP,
    FilterSpec,
    VoteConfig,
    apply_filter,
    vote_score,
)
from .features import FeatureConfig
from .metrics import (
    calibrate_threshold,
    eval_far,
    eval_frr,
    read_trials_csv,
    split_trials,
    write_scores_csv,
    write_trials_csv,
)
from .model import TrainConfig, _unit_cosine, load_checkpoint, save_checkpoint, train
from .seeding import derive_seed

TRIALS_NAME = "trials.csv"
CHECKPOINT_NAME = "model.ckpt"
TRAIN_LOG_NAME = "train_log.csv"
SCORES_NAME = "scores.csv"
REPORT_NAME = "report.csv"
SWEEP_VOTES_NAME = "sweep_votes.csv"
SWEEP_ITERS_NAME = "sweep_iters.csv"

REPORT_COLUMNS = (
    "attack_kind",
    "epsilon",
    "n_iters",
    "defense_kind",
    "sigma",
    "k_votes",
    "far",
    "frr",
    "n_trials",
    "wall_time",
)
TRAIN_LOG_COLUMNS = ("epoch", "loss", "dev_eer")
SWEEP_VOTES_COLUMNS = (
    "k_votes",
    "sigma",
    "epsilon",
    "n_iters",
    "far",
    "frr",
    "n_trials",
    "wall_time",
)
SWEEP_ITERS_COLUMNS = (
    "n_iters",
    "budget",
    "k_votes",
    "sigma",
    "epsilon",
    "far",
    "frr",
    "n_trials",
    "wall_time",
)


@dataclass(frozen=True)
class AttackGridConfig:
    epsilon_grid: tuple = (1.0, 5.0, 10.0)
    n_iters: int = 5

    def __post_init__(self):
        if any(e < 0 for e in self.epsilon_grid):
            raise ValueError("epsilon_grid entries must be non-negative")
        if self.n_iters < 1:
            raise ValueError("n_iters must be at least 1")


@dataclass(frozen=True)
class DefenseGridConfig:
    sigma_grid: tuple = SIGMA_SWEEP
    k_votes: int = DEFAULT_K_VOTES
    filters: tuple = DEFAULT_FILTERS

    def __post_init__(self):
        if any(s < 0 for s in self.sigma_grid):
            raise ValueError("sigma_grid entries must be non-negative")
        if self.k_votes < 0:
            raise ValueError("k_votes must be non-negative")


@dataclass(frozen=True)
class SweepVotesConfig:
    epsilon: float = 5.0
    n_iters: int = 5
    sigma: float = 60.0
    k_grid: tuple = (0, 1, 2, 5, 10, 20, 50)

    def __post_init__(self):
        if not self.k_grid:
            raise ValueError("k_grid must be non-empty")
        if any(k < 0 for k in self.k_grid):
            raise ValueError("k_grid entries must be non-negative")


@dataclass(frozen=True)
class SweepItersConfig:
    epsilon: float = 5.0
    sigma: float = 60.0
    k_votes: int = 5
    n_grid: tuple = (1, 5, 10, 20, 40)

    def __post_init__(self):
        if not self.n_grid:
            raise ValueError("n_grid must be non-empty")
        if any(n < 1 for n in self.n_grid):
            raise ValueError("n_grid entries must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "workspace"
    corpus: CorpusConfig = CorpusConfig()
    feature: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()
    n_target_trials: int = 300
    n_nontarget_trials: int = 300
    dev_fraction: float = 2.0 / 3.0
    attack: AttackGridConfig = AttackGridConfig()
    defense: DefenseGridConfig = DefenseGridConfig()
    sweep_votes: SweepVotesConfig = SweepVotesConfig()
    sweep_iters: SweepItersConfig = SweepItersConfig()
    export_adversarial: bool = False

    def __post_init__(self):
        if self.corpus.sample_rate != self.feature.sample_rate:
            raise ValueError(
                "corpus and feature sample rates disagree: "
                f"{self.corpus.sample_rate} vs {self.feature.sample_rate}"
            )
        if self.n_target_trials < 1 or self.n_nontarget_trials < 1:
            raise ValueError("trial counts must be positive")


_SECTIONS = {
    "corpus": CorpusConfig,
    "feature": FeatureConfig,
    "train": TrainConfig,
    "attack": AttackGridConfig,
    "defense": DefenseGridConfig,
    "sweep_votes": SweepVotesConfig,
    "sweep_iters": SweepItersConfig,
}
# sub-seeds are derived from the top-level seed; a nested one would be ignored
_NO_NESTED_SEED = ("corpus", "train")


def _build_section(cls, raw, where):
    if not isinstance(raw, dict):
        raise ValueError(f"config section {where!r} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if where in _NO_NESTED_SEED and key == "seed":
            raise ValueError(
                f"{where}.seed is derived from the top-level seed; set that instead"
            )
        if key not in names:
            raise ValueError(f"unknown config key {where}.{key}")
        if key == "filters":
            value = tuple(_build_section(FilterSpec, spec, f"{where}.filters[{i}]")
                          for i, spec in enumerate(value))
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ValueError(f"unknown config key {key}")
        if key in _SECTIONS:
            value = _build_section(_SECTIONS[key], value, key)
        kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path=None) -> ExperimentConfig:
    """Resolve --config: a JSON file path, "paper-preset", or None (preset)."""
    if path is None or path == "paper-preset":
        return ExperimentConfig()
    with open(path) as f:
        return config_from_dict(json.load(f))


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _pmap(fn, items, threads: int):
    """Order-preserving map, optionally over a worker pool."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)


class _RowTimer:
    """Wall-clock per report row; renders blank under --no-timing."""

    def __init__(self, timing: bool):
        self.timing = timing
        self.extra = 0.0

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0 + self.extra

    def cell(self) -> str:
        return f"{self.elapsed:.3f}" if self.timing else ""


def run_gen_corpus(config: ExperimentConfig, out_dir) -> str:
    """Synthesize the corpus and trial lists; returns the manifest hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_cfg = dataclasses.replace(config.corpus, seed=config.seed)
    corpus = generate_corpus(corpus_cfg)
    digest = write_corpus(corpus, out)
    trials = build_trials(
        corpus.utterances,
        config.n_target_trials,
        config.n_nontarget_trials,
        seed=config.seed,
    )
    trial_set = split_trials(trials, config.dev_fraction, seed=config.seed)
    write_trials_csv(out / TRIALS_NAME, trial_set.trials)
    return digest


def run_train(config: ExperimentConfig, out_dir) -> Path:
    """Train on the generated corpus; writes checkpoint + per-epoch log."""
    out = Path(out_dir)
    utterances, rate = load_corpus_dir(out)
    if rate != config.feature.sample_rate:
        raise ValueError(
            f"corpus sample rate {rate} != feature config {config.feature.sample_rate}"
        )
    dev_trials = None
    trials_path = out / TRIALS_NAME
    if trials_path.exists():
        dev = read_trials_csv(trials_path).dev
        dev_trials = [(t.enroll_id, t.test_id, t.is_target) for t in dev]

    log_rows = []

    def record(epoch, loss, dev_eer):
        log_rows.append(
            [epoch, _fmt(loss), "" if dev_eer is None else _fmt(dev_eer)]
        )

    train_cfg = dataclasses.replace(config.train, seed=config.seed)
    model = train(
        utterances,
        train_cfg,
        config.feature,
        dev_trials=dev_trials,
        epoch_callback=record,
    )
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(model, ckpt)
    _write_csv(out / TRAIN_LOG_NAME, TRAIN_LOG_COLUMNS, log_rows)
    return ckpt


def _load_workspace(config: ExperimentConfig, out_dir):
    out = Path(out_dir)
    model = load_checkpoint(out / CHECKPOINT_NAME)
    utterances, rate = load_corpus_dir(out)
    trial_set = read_trials_csv(out / TRIALS_NAME)
    waves = {u.utterance_id: u.waveform for u in utterances}
    # single-waveform embeddings, the same call path vote scoring uses
    embeddings = {uid: model.embed(w) for uid, w in waves.items()}
    return out, model, rate, trial_set, waves, embeddings


def _genuine_scores(trial_set, embeddings):
    return [
        (t, _unit_cosine(embeddings[t.test_id], embeddings[t.enroll_id]))
        for t in trial_set.trials
    ]


def _calibrate(scored):
    tgt = [s for t, s in scored if t.partition == "dev" and t.is_target]
    ntgt = [s for t, s in scored if t.partition == "dev" and not t.is_target]
    return calibrate_threshold(tgt, ntgt)


def _rates(eval_trials, scores, tau):
    far = eval_far([s for t, s in zip(eval_trials, scores) if not t.is_target], tau)
    frr = eval_frr([s for t, s in zip(eval_trials, scores) if t.is_target], tau)
    return far, frr


def _plain_scores(model, eval_trials, test_waves, embeddings, threads):
    def one(trial):
        emb = model.embed(test_waves[trial.trial_id])
        return _unit_cosine(emb, embeddings[trial.enroll_id])

    return _pmap(one, eval_trials, threads)


def _vote_scores(model, eval_trials, test_waves, embeddings, sigma, k, seed, threads):
    def one(trial):
        cfg = VoteConfig(
            sigma=sigma,
            k_votes=k,
            seed=derive_seed(seed, trial.trial_id, "defense"),
        )
        return vote_score(
            model,
            test_waves[trial.trial_id],
            None,
            cfg,
            enroll_embedding=embeddings[trial.enroll_id],
        )

    return _pmap(one, eval_trials, threads)


def _filter_scores(model, eval_trials, test_waves, embeddings, spec, threads):
    def one(trial):
        emb = model.embed(apply_filter(test_waves[trial.trial_id], spec))
        return _unit_cosine(emb, embeddings[trial.enroll_id])

    return _pmap(one, eval_trials, threads)


def _defense_rows(
    config, model, eval_trials, test_waves, embeddings, tau,
    attack_cells, threads, timing, attack_extra=0.0,
):
    """All defense rows for one attack setting, in fixed grid order."""
    attack_kind, eps_cell, iters_cell = attack_cells
    n = len(eval_trials)
    rows = []

    def emit(defense_kind, sigma_cell, k_cell, scores, timer):
        far, frr = _rates(eval_trials, scores, tau)
        rows.append(
            [
                attack_kind, eps_cell, iters_cell,
                defense_kind, sigma_cell, k_cell,
                _fmt(far), _fmt(frr), n, timer.cell(),
            ]
        )

    with _RowTimer(timing) as timer:
        timer.extra = attack_extra  # attack generation billed to its none row
        scores = _plain_scores(model, eval_trials, test_waves, embeddings, threads)
    emit("none", "", "", scores, timer)

    for sigma in config.defense.sigma_grid:
        with _RowTimer(timing) as timer:
            scores = _vote_scores(
                model, eval_trials, test_waves, embeddings,
                sigma, config.defense.k_votes, config.seed, threads,
            )
        emit("vote", _fmt(sigma), config.defense.k_votes, scores, timer)

    for spec in config.defense.filters:
        with _RowTimer(timing) as timer:
            scores = _filter_scores(
                model, eval_trials, test_waves, embeddings, spec, threads
            )
        emit(f"filter-{spec.kind}", "", "", scores, timer)

    return rows


def run_evaluate(config: ExperimentConfig, out_dir, threads: int = 1, timing: bool = True) -> Path:
    """Score the full attack x defense grid at the dev-calibrated threshold.

    Writes scores.csv (genuine scores for every trial) and report.csv with
    one row per grid cell: the no-attack row block first, then one block
    per epsilon, each block covering no defense, the sigma sweep, and the
    filter baselines. Attacked waveforms are generated once per epsilon
    and shared by that block's defense rows.
    """
    out, model, rate, trial_set, waves, embeddings = _load_workspace(config, out_dir)
    scored = _genuine_scores(trial_set, embeddings)
    write_scores_csv(out / SCORES_NAME, scored)
    tau = _calibrate(scored).tau

    eval_trials = trial_set.eval
    rows = []

    clean = {t.trial_id: waves[t.test_id] for t in eval_trials}
    rows += _defense_rows(
        config, model, eval_trials, clean, embeddings, tau,
        ("none", "", ""), threads, timing,
    )

    for eps in config.attack.epsilon_grid:
        attack_cfg = AttackConfig(epsilon=eps, n_iters=config.attack.n_iters)
        t0 = time.perf_counter()

        def attack(trial):
            return bim(
                model,
                waves[trial.test_id],
                waves[trial.enroll_id],
                trial.is_target,
                attack_cfg,
            )

        results = _pmap(attack, eval_trials, threads)
        attack_time = time.perf_counter() - t0
        adv = {t.trial_id: r.x_adv for t, r in zip(eval_trials, results)}
        if config.export_adversarial:
            write_adversarial_wavs(
                {t.trial_id: r for t, r in zip(eval_trials, results)},
                eval_trials,
                out / f"adversarial-eps{eps:g}",
                rate,
                "bim",
                attack_cfg,
            )
        rows += _defense_rows(
            config, model, eval_trials, adv, embeddings, tau,
            ("bim", _fmt(eps), config.attack.n_iters), threads, timing,
            attack_extra=attack_time,
        )

    report = out / REPORT_NAME
    _write_csv(report, REPORT_COLUMNS, rows)
    return report


def run_sweep_votes(config: ExperimentConfig, out_dir, threads: int = 1, timing: bool = True) -> Path:
    """FAR/FRR versus vote count K at fixed epsilon and sigma (limited knowledge)."""
    out, model, rate, trial_set, waves, embeddings = _load_workspace(config, out_dir)
    tau = _calibrate(_genuine_scores(trial_set, embeddings)).tau
    eval_trials = trial_set.eval
    sweep = config.sweep_votes
    attack_cfg = AttackConfig(epsilon=sweep.epsilon, n_iters=sweep.n_iters)

    def attack(trial):
        return bim(
            model,
            waves[trial.test_id],
            waves[trial.enroll_id],
            trial.is_target,
            attack_cfg,
        )

    results = _pmap(attack, eval_trials, threads)
    adv = {t.trial_id: r.x_adv for t, r in zip(eval_trials, results)}

    rows = []
    for k in sorted(sweep.k_grid):
        with _RowTimer(timing) as timer:
            scores = _vote_scores(
                model, eval_trials, adv, embeddings,
                sweep.sigma, k, config.seed, threads,
            )
        far, frr = _rates(eval_trials, scores, tau)
        rows.append(
            [
                k, _fmt(sweep.sigma), _fmt(sweep.epsilon), sweep.n_iters,
                _fmt(far), _fmt(frr), len(eval_trials), timer.cell(),
            ]
        )

    path = out / SWEEP_VOTES_NAME
    _write_csv(path, SWEEP_VOTES_COLUMNS, rows)
    return path


def run_sweep_iters(config: ExperimentConfig, out_dir, threads: int = 1, timing: bool = True) -> Path:
    """FAR/FRR versus iteration budget N for the perfect-knowledge attacker.

    The attacker differentiates through its own noise sampling of the
    (sigma, K) voting defense; evaluation then votes with the defender's
    per-trial streams, which the attacker never sees. The budget column
    is N*(K+1) score-gradient evaluations, asserted against the attack's
    own accounting.
    """
    out, model, rate, trial_set, waves, embeddings = _load_workspace(config, out_dir)
    tau = _calibrate(_genuine_scores(trial_set, embeddings)).tau
    eval_trials = trial_set.eval
    sweep = config.sweep_iters
    attacker_knowledge = VoteConfig(sigma=sweep.sigma, k_votes=sweep.k_votes)

    rows = []
    for n in sorted(sweep.n_grid):
        attack_cfg = AttackConfig(epsilon=sweep.epsilon, n_iters=n)

        def attack(trial):
            return bim_adaptive_vs_voting(
                model,
                waves[trial.test_id],
                waves[trial.enroll_id],
                trial.is_target,
                attack_cfg,
                attacker_knowledge,
                attacker_seed=derive_seed(config.seed, trial.trial_id, "attacker"),
            )

        with _RowTimer(timing) as timer:
            results = _pmap(attack, eval_trials, threads)
            budget = n * (sweep.k_votes + 1)
            for r in results:
                if r.forward_backward_count != budget:
                    raise AssertionError(
                        f"budget accounting broke: {r.forward_backward_count} != {budget}"
                    )
            adv = {t.trial_id: r.x_adv for t, r in zip(eval_trials, results)}
            scores = _vote_scores(
                model, eval_trials, adv, embeddings,
                sweep.sigma, sweep.k_votes, config.seed, threads,
            )
        far, frr = _rates(eval_trials, scores, tau)
        rows.append(
            [
                n, budget, sweep.k_votes, _fmt(sweep.sigma), _fmt(sweep.epsilon),
                _fmt(far), _fmt(frr), len(eval_trials), timer.cell(),
            ]
        )

    path = out / SWEEP_ITERS_NAME
    _write_csv(path, SWEEP_ITERS_COLUMNS, rows)
    return path
