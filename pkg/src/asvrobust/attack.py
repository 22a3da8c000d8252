"""Iterative sign-gradient attacks on the verification score.

All variants run the basic iterative method: N steps of size alpha in
the signed gradient direction of the score, projected after every step
onto the L-inf ball of radius epsilon around the original utterance
(and finally onto the legal waveform range). Non-target trials push the
score up to force a false accept; target trials push it down to force a
false reject. Budgets (epsilon, alpha, sigma) are in 16-bit amplitude
units.

Three knowledge levels:

* ``bim``: the attacker sees only the undefended scoring function.
* ``bim_adaptive_vs_voting``: the attacker knows a voting defense with
  (K, sigma) is in place and differentiates through the average score
  over its own freshly sampled noise neighbourhood each iteration
  (expectation over transformation). It cannot know the defender's
  inference-time noise seed, so it uses its own RNG.
* ``bim_vs_filter``: the attacker knows the test input is filtered and
  differentiates through the filter.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .defense import FilterSpec, VoteConfig, filter_graph
from .seeding import derive_seed
from .wavio import AMPLITUDE_UNIT


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float              # L-inf budget, 16-bit amplitude units
    n_iters: int = 5
    step_alpha: float | None = None  # defaults to epsilon / n_iters

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.n_iters < 1:
            raise ValueError("n_iters must be at least 1")
        if self.step_alpha is not None and self.epsilon > 0 and self.step_alpha <= 0:
            raise ValueError("step_alpha must be positive when epsilon > 0")

    @property
    def alpha(self) -> float:
        if self.step_alpha is not None:
            return self.step_alpha
        return self.epsilon / self.n_iters


@dataclass
class AdversarialResult:
    """One attacked trial.

    ``score_before``/``score_after`` are the raw undefended cosine of
    the original and adversarial waveforms against the enrolment;
    defended scores depend on the defender's secret seed and are
    computed at evaluation time. ``linf_distance`` is in amplitude
    units, directly comparable to epsilon. ``forward_backward_count``
    counts score-gradient evaluations, the attack budget measure.
    """

    x_adv: np.ndarray
    linf_distance: float
    score_before: float
    score_after: float
    forward_backward_count: int


def _score_graph(model, x: ad.Tensor, enroll_embedding) -> ad.Tensor:
    """Per-row cosine scores of taped waveforms against a fixed enrolment."""
    emb = model.embed_graph(x)
    return ad.reduce_sum(ad.multiply(emb, enroll_embedding), axis=-1)


def _check_gradient(g, variant, iteration):
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(
            f"{variant}: non-finite gradient at iteration {iteration}"
        )


def _finish(model, x_t, x, x_enroll, count):
    x = np.clip(x, -1.0, 1.0)
    linf = float(np.abs(x - x_t).max() / AMPLITUDE_UNIT)
    return AdversarialResult(
        x_adv=x,
        linf_distance=linf,
        score_before=model.score(x_t, x_enroll),
        score_after=model.score(x, x_enroll),
        forward_backward_count=count,
    )


def bim(model, x_test, x_enroll, is_target: bool, config: AttackConfig) -> AdversarialResult:
    """Basic iterative attack against the undefended score."""
    x_t = np.asarray(x_test, dtype=np.float64)
    eps = config.epsilon * AMPLITUDE_UNIT
    step = config.alpha * AMPLITUDE_UNIT * (-1.0 if is_target else 1.0)
    lo, hi = x_t - eps, x_t + eps
    enroll = model.embed(x_enroll)

    x = x_t.copy()
    for it in range(config.n_iters):
        tape = ad.Tape()
        leaf = tape.leaf(x[None, :])
        s = ad.reduce_sum(_score_graph(model, leaf, enroll))
        g = tape.backward(s)[leaf.node_id][0]
        _check_gradient(g, "bim", it)
        x = np.clip(x + step * np.sign(g), lo, hi)
    return _finish(model, x_t, x, x_enroll, config.n_iters)


def bim_adaptive_vs_voting(
    model,
    x_test,
    x_enroll,
    is_target: bool,
    config: AttackConfig,
    vote_config: VoteConfig,
    attacker_seed: int = 0,
) -> AdversarialResult:
    """Adaptive attack on the voting defense.

    Each iteration draws a fresh noise neighbourhood of the attacker's
    own (it cannot see the defender's inference seed), scores the K+1
    points in one batch and ascends the gradient of their mean. Cost is
    n_iters * (k_votes + 1) score-gradient evaluations.
    """
    x_t = np.asarray(x_test, dtype=np.float64)
    eps = config.epsilon * AMPLITUDE_UNIT
    step = config.alpha * AMPLITUDE_UNIT * (-1.0 if is_target else 1.0)
    lo, hi = x_t - eps, x_t + eps
    enroll = model.embed(x_enroll)
    k = vote_config.k_votes
    sigma = vote_config.sigma * AMPLITUDE_UNIT
    rng = np.random.default_rng(derive_seed(attacker_seed, "adaptive-attack"))

    x = x_t.copy()
    count = 0
    for it in range(config.n_iters):
        noise = rng.standard_normal((k, x.size)) * sigma
        batch = np.concatenate([x[None, :], np.clip(x[None, :] + noise, -1.0, 1.0)])
        tape = ad.Tape()
        leaf = tape.leaf(batch)
        s = ad.reduce_mean(_score_graph(model, leaf, enroll))
        g = tape.backward(s)[leaf.node_id].sum(axis=0)
        _check_gradient(g, "bim_adaptive_vs_voting", it)
        count += k + 1
        x = np.clip(x + step * np.sign(g), lo, hi)
    return _finish(model, x_t, x, x_enroll, count)


def bim_vs_filter(
    model,
    filter_spec: FilterSpec,
    x_test,
    x_enroll,
    is_target: bool,
    config: AttackConfig,
) -> AdversarialResult:
    """Attack a filter-defended system by differentiating through the filter."""
    x_t = np.asarray(x_test, dtype=np.float64)
    eps = config.epsilon * AMPLITUDE_UNIT
    step = config.alpha * AMPLITUDE_UNIT * (-1.0 if is_target else 1.0)
    lo, hi = x_t - eps, x_t + eps
    enroll = model.embed(x_enroll)

    x = x_t.copy()
    for it in range(config.n_iters):
        tape = ad.Tape()
        leaf = tape.leaf(x[None, :])
        s = ad.reduce_sum(_score_graph(model, filter_graph(leaf, filter_spec), enroll))
        g = tape.backward(s)[leaf.node_id][0]
        _check_gradient(g, "bim_vs_filter", it)
        x = np.clip(x + step * np.sign(g), lo, hi)
    return _finish(model, x_t, x, x_enroll, config.n_iters)


def write_adversarial_wavs(results, trials, out_dir, sample_rate, attack_kind, config):
    """Export attacked waveforms as 16-bit PCM WAVs plus a manifest CSV."""
    import csv
    from pathlib import Path

    from .wavio import write_wav

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "adversarial_manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial_id", "path", "epsilon", "n_iters", "attack_kind"])
        for trial in trials:
            res = results[trial.trial_id]
            rel = f"{trial.trial_id}.wav"
            write_wav(out / rel, res.x_adv, sample_rate)
            writer.writerow(
                [trial.trial_id, rel, f"{config.epsilon:.10g}", config.n_iters, attack_kind]
            )
    return manifest
