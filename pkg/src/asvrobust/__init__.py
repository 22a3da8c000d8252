"""Desk-scale adversarial-robustness testbed for speaker verification.

The pieces compose in pipeline order: a synthetic speaker corpus, a
differentiable log-mel front-end, a small embedding model with cosine
scoring, EER-calibrated metrics, iterative sign-gradient attacks, and
the score-voting defense with filter baselines. The experiment module
and the ``asvrobust`` command drive full attack/defense grids.
"""

from .attack import AdversarialResult, AttackConfig, bim, bim_adaptive_vs_voting, bim_vs_filter
from .corpus import (
    Corpus,
    CorpusConfig,
    SpeakerProfile,
    Utterance,
    build_trials,
    gen_speaker,
    generate_corpus,
    synth_utterance,
)
from .defense import FilterSpec, VoteConfig, apply_filter, sample_neighbors, vote_score
from .experiment import (
    ExperimentConfig,
    config_from_dict,
    load_config,
    run_evaluate,
    run_gen_corpus,
    run_sweep_iters,
    run_sweep_votes,
    run_train,
)
from .features import FeatureConfig, extract_fbank, frame_signal, mel_filterbank, power_spectrum
from .metrics import (
    Threshold,
    Trial,
    TrialSet,
    calibrate_threshold,
    dev_far,
    dev_frr,
    eval_far,
    eval_frr,
    split_trials,
    vote_far,
    vote_frr,
)
from .model import (
    AsvModel,
    TrainConfig,
    am_softmax_loss,
    embed_utterances,
    init_model,
    load_checkpoint,
    pool_asp,
    pool_sap,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
