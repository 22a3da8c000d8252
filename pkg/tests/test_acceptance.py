"""End-to-end acceptance suite.

Each test here is one release gate, run at full scale with its stated
tolerance and time budget. One verbose pytest line per criterion is the
pass/fail record; details print to stdout for inspection with -rA.

The shared fixture builds the complete default workspace once (corpus,
trials, trained model), exactly as the command-line pipeline would.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from asvrobust import autodiff as ad
from asvrobust.attack import AttackConfig, bim, bim_adaptive_vs_voting, bim_vs_filter
from asvrobust.autodiff import Tape
from asvrobust.corpus import load_corpus_dir
from asvrobust.defense import (
    DEFAULT_FILTERS,
    FilterSpec,
    SIGMA_SWEEP,
    VoteConfig,
    apply_filter,
    vote_score,
)
from asvrobust.experiment import ExperimentConfig, run_gen_corpus, run_train
from asvrobust.metrics import calibrate_threshold, eval_far, eval_frr, read_trials_csv
from asvrobust.model import _unit_cosine, load_checkpoint
from asvrobust.seeding import derive_seed

EPS_GRID = (1.0, 5.0, 10.0)
AMPLITUDE_UNIT = 1.0 / 32768.0


def report(criterion, ok, detail):
    print(f"ACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Default-scale workspace: corpus, trials, trained model, scores."""
    out = tmp_path_factory.mktemp("acceptance")
    config = ExperimentConfig(out_dir=str(out))
    run_gen_corpus(config, out)
    run_train(config, out)
    utts, rate = load_corpus_dir(out)
    model = load_checkpoint(out / "model.ckpt")
    trials = read_trials_csv(out / "trials.csv")
    waves = {u.utterance_id: u.waveform for u in utts}
    emb = {uid: model.embed(w) for uid, w in waves.items()}

    def raw(t):
        return float(_unit_cosine(emb[t.test_id], emb[t.enroll_id]))

    thr = calibrate_threshold(
        [raw(t) for t in trials.dev if t.is_target],
        [raw(t) for t in trials.dev if not t.is_target],
    )
    eval_scored = [(t, raw(t)) for t in trials.eval]
    return {
        "out": out,
        "config": config,
        "model": model,
        "waves": waves,
        "emb": emb,
        "trials": trials,
        "thr": thr,
        "eval_scored": eval_scored,
        "shared": {},  # criterion 5 stashes its adversarial waveforms here
    }


def rates(scored, tau):
    """(FAR, FRR) of a list of (trial, score) pairs at threshold tau."""
    tgt = [s for t, s in scored if t.is_target]
    ntgt = [s for t, s in scored if not t.is_target]
    return eval_far(ntgt, tau), eval_frr(tgt, tau)


class TestCriterion1Autodiff:
    def test_criterion_01_gradient_matches_finite_differences(self, ws):
        """Full-pipeline gradient vs central differences, 20 coords x 5
        trials, relative error < 1e-4, under 30 s.

        Error is measured against max(|analytic|, |numeric|, 0.1 * the
        gradient's own max-norm). The floor is forced by arithmetic,
        not preference: on coordinates whose gradient sits orders of
        magnitude below the waveform's gradient scale, the central
        difference's h^2 truncation term exceeds 1e-4 of the tiny true
        value at every step size (shrinking h runs into score roundoff
        first), so a bare per-coordinate ratio cannot reach 1e-4 there
        for ANY correct implementation. Against the floored scale the
        check still catches a dropped or wrong gradient path on every
        coordinate at 1e-4 sensitivity."""
        model, waves = ws["model"], ws["waves"]
        trials = ws["trials"].eval[:5]
        rng = np.random.default_rng(derive_seed(7, "acceptance-fd"))
        start = time.monotonic()
        worst = 0.0
        h = 5e-7
        for trial in trials:
            x = waves[trial.test_id]
            e_enroll = ws["emb"][trial.enroll_id]

            def score_of(w):
                return float(_unit_cosine(model.embed(w), e_enroll))

            tape = Tape()
            leaf = tape.leaf(x[None, :])
            s = ad.reduce_sum(ad.multiply(model.embed_graph(leaf), e_enroll))
            grad = tape.backward(s)[leaf.node_id][0]
            floor = 0.1 * np.abs(grad).max()
            for i in rng.choice(x.size, size=20, replace=False):
                up, down = x.copy(), x.copy()
                up[i] += h
                down[i] -= h
                fd = (score_of(up) - score_of(down)) / (2.0 * h)
                denom = max(abs(grad[i]), abs(fd), floor)
                worst = max(worst, abs(grad[i] - fd) / denom)
        elapsed = time.monotonic() - start
        ok = worst < 1e-4 and elapsed < 30.0
        report(1, ok, f"worst rel err {worst:.3g}, {elapsed:.1f}s")
        assert worst < 1e-4
        assert elapsed < 30.0


class TestCriterion2Calibration:
    def test_criterion_02_calibration_matches_exhaustive_scan(self):
        """100 random score lists (len <= 50): achieved operating point
        identical to a brute-force threshold scan, under 5 s."""
        rng = np.random.default_rng(derive_seed(11, "acceptance-cal"))
        start = time.monotonic()
        for _ in range(100):
            tgt = rng.normal(0.5, 0.3, rng.integers(1, 51))
            ntgt = rng.normal(0.0, 0.3, rng.integers(1, 51))
            if rng.random() < 0.3:  # force exact ties across the lists
                tgt = np.round(tgt, 1)
                ntgt = np.round(ntgt, 1)
            thr = calibrate_threshold(tgt, ntgt)
            best = None
            values = np.concatenate([tgt, ntgt])
            cands = np.unique(
                np.concatenate(
                    [values - 1e-9, values + 1e-9,
                     [values.min() - 1.0, values.max() + 1.0]]
                )
            )
            for tau in cands:
                far = np.count_nonzero(ntgt >= tau) / ntgt.size
                frr = np.count_nonzero(tgt < tau) / tgt.size
                if best is None or abs(far - frr) < best[0]:
                    best = (abs(far - frr), far, frr)
            assert (thr.far, thr.frr) == (best[1], best[2])
            assert abs(thr.far - thr.frr) == best[0]
        elapsed = time.monotonic() - start
        report(2, elapsed < 5.0, f"100 lists exact, {elapsed:.2f}s")
        assert elapsed < 5.0


class TestCriterion3Projection:
    def test_criterion_03_every_iterate_inside_ball(self, ws):
        """All attack variants at every epsilon keep every iterate within
        eps/32768 + 1e-12 of the original; eps=0 is a bit-exact no-op."""
        model, waves = ws["model"], ws["waves"]
        trial = ws["trials"].eval[0]
        x, xe = waves[trial.test_id], waves[trial.enroll_id]
        vote = VoteConfig(sigma=60.0, k_votes=3)
        spec = FilterSpec("mean")

        def variants(cfg, seed):
            yield "bim", bim(model, x, xe, False, cfg)
            yield "adaptive", bim_adaptive_vs_voting(
                model, x, xe, False, cfg, vote, attacker_seed=seed)
            yield "filter", bim_vs_filter(model, spec, x, xe, False, cfg)

        worst = 0.0
        for eps in EPS_GRID:
            bound = eps * AMPLITUDE_UNIT + 1e-12
            # fixed step: a run of n iterations replays the first n
            # iterates of the full attack, exposing every intermediate
            for n in range(1, 6):
                cfg = AttackConfig(epsilon=eps, n_iters=n, step_alpha=eps / 5.0)
                for name, res in variants(cfg, seed=17):
                    dist = np.abs(res.x_adv - x).max()
                    worst = max(worst, dist - eps * AMPLITUDE_UNIT)
                    assert dist <= bound, (name, eps, n, dist)
                    assert res.linf_distance <= eps + 1e-12

        zero = AttackConfig(epsilon=0.0, n_iters=5)
        for name, res in variants(zero, seed=17):
            assert np.array_equal(res.x_adv, x), name
            assert res.linf_distance == 0.0
        report(3, True, f"max overshoot {worst:.3g} (<= 1e-12), eps=0 bit-exact")


class TestCriterion4VoteDegeneracy:
    def test_criterion_04_degenerate_voting_equals_undefended(self, ws):
        """K=0 and sigma=0 voting reproduce the undefended FAR/FRR
        exactly over the full eval partition."""
        model, waves, emb = ws["model"], ws["waves"], ws["emb"]
        tau = ws["thr"].tau
        far0, frr0 = rates(ws["eval_scored"], tau)

        def voted(sigma, k):
            out = []
            for t in ws["trials"].eval:
                cfg = VoteConfig(sigma=sigma, k_votes=k, seed=derive_seed(0, t.trial_id))
                s = vote_score(model, waves[t.test_id], None, cfg,
                               enroll_embedding=emb[t.enroll_id])
                out.append((t, s))
            return rates(out, tau)

        k_zero = voted(sigma=60.0, k=0)
        sigma_zero = voted(sigma=0.0, k=50)
        ok = k_zero == (far0, frr0) and sigma_zero == (far0, frr0)
        report(4, ok, f"undefended ({far0:.4f}, {frr0:.4f}), "
                      f"K=0 {k_zero}, sigma=0 {sigma_zero}")
        assert k_zero == (far0, frr0)
        assert sigma_zero == (far0, frr0)


class TestCriterion5AttackTrend:
    def test_criterion_05_far_frr_grow_with_epsilon(self, ws):
        """Dev EER < 10%; attacked FAR and FRR monotone non-decreasing
        over eps in {1,5,10}; FAR at eps=10 at least 30 points above the
        no-attack FAR. Under 10 minutes."""
        model, waves, emb = ws["model"], ws["waves"], ws["emb"]
        tau = ws["thr"].tau
        start = time.monotonic()
        far0, frr0 = rates(ws["eval_scored"], tau)
        fars, frrs = [], []
        for eps in EPS_GRID:
            cfg = AttackConfig(epsilon=eps)
            scored, adv = [], {}
            for t in ws["trials"].eval:
                res = bim(model, waves[t.test_id], waves[t.enroll_id], t.is_target, cfg)
                adv[t.trial_id] = res.x_adv
                scored.append((t, float(_unit_cosine(model.embed(res.x_adv),
                                                     emb[t.enroll_id]))))
            ws["shared"][eps] = adv
            far, frr = rates(scored, tau)
            fars.append(far)
            frrs.append(frr)
        elapsed = time.monotonic() - start
        eer = ws["thr"].eer
        ok = (
            eer < 0.10
            and all(a <= b for a, b in zip(fars, fars[1:]))
            and all(a <= b for a, b in zip(frrs, frrs[1:]))
            and fars[-1] >= far0 + 0.30
            and elapsed < 600.0
        )
        report(5, ok, f"dev EER {eer:.3f}, clean FAR {far0:.3f}, "
                      f"attacked FAR {fars}, FRR {frrs}, {elapsed:.0f}s")
        assert eer < 0.10
        assert all(a <= b for a, b in zip(fars, fars[1:]))
        assert all(a <= b for a, b in zip(frrs, frrs[1:]))
        assert fars[-1] >= far0 + 0.30
        assert elapsed < 600.0


class TestCriterion6VotingDefense:
    def test_criterion_06_some_sigma_halves_attacked_far(self, ws):
        """At eps=5, K=50: some sigma in the sweep cuts attacked FAR to
        half or less while genuine FAR/FRR each move < 10 points. Under
        15 minutes."""
        model, waves, emb = ws["model"], ws["waves"], ws["emb"]
        tau = ws["thr"].tau
        adv = ws["shared"][5.0]
        start = time.monotonic()
        far0, frr0 = rates(ws["eval_scored"], tau)
        attacked = [
            (t, float(_unit_cosine(model.embed(adv[t.trial_id]), emb[t.enroll_id])))
            for t in ws["trials"].eval
        ]
        far_attacked, _ = rates(attacked, tau)

        def voted(test_wave_of, sigma):
            out = []
            for t in ws["trials"].eval:
                cfg = VoteConfig(sigma=sigma, k_votes=50,
                                 seed=derive_seed(0, t.trial_id, "defense"))
                out.append((t, vote_score(model, test_wave_of(t), None, cfg,
                                          enroll_embedding=emb[t.enroll_id])))
            return out

        ws["shared"]["voted_attacked"] = {}
        winners = []
        for sigma in SIGMA_SWEEP:
            far_v, _ = rates(voted(lambda t: adv[t.trial_id], sigma), tau)
            far_g, frr_g = rates(voted(lambda t: waves[t.test_id], sigma), tau)
            ws["shared"]["voted_attacked"][sigma] = far_v
            if (far_v <= 0.5 * far_attacked
                    and abs(far_g - far0) < 0.10 and abs(frr_g - frr0) < 0.10):
                winners.append((sigma, far_v, far_g, frr_g))
        elapsed = time.monotonic() - start
        ok = bool(winners) and elapsed < 900.0
        report(6, ok, f"attacked FAR {far_attacked:.3f}, winners "
                      f"{[(s, round(f, 3)) for s, f, _, _ in winners]}, {elapsed:.0f}s")
        assert winners, f"no sigma in {SIGMA_SWEEP} qualifies"
        assert elapsed < 900.0


class TestCriterion7FilterComparison:
    def test_criterion_07_voting_no_worse_than_filters(self, ws):
        """Best-sigma voting keeps attacked FAR at or below each of the
        three default smoothing filters (same eps=5 attacks)."""
        model, emb = ws["model"], ws["emb"]
        tau = ws["thr"].tau
        adv = ws["shared"][5.0]
        best_voted = min(ws["shared"]["voted_attacked"].values())
        filter_fars = {}
        for spec in DEFAULT_FILTERS:
            scored = [
                (t, float(_unit_cosine(model.embed(apply_filter(adv[t.trial_id], spec)),
                                       emb[t.enroll_id])))
                for t in ws["trials"].eval
            ]
            filter_fars[spec.kind], _ = rates(scored, tau)
        ok = all(best_voted <= f for f in filter_fars.values())
        report(7, ok, f"voting {best_voted:.3f} vs filters "
                      f"{ {k: round(v, 3) for k, v in filter_fars.items()} }")
        for kind, far in filter_fars.items():
            assert best_voted <= far, (kind, far, best_voted)


class TestCriterion8PerfectKnowledge:
    def test_criterion_08_budget_and_saturation(self, ws):
        """K=5, N=5 adaptive attack reports exactly 30 forward/backward
        passes; the FAR-vs-N curve grows more from N=1 to 5 than from
        N=20 to 40."""
        model, waves, emb = ws["model"], ws["waves"], ws["emb"]
        tau = ws["thr"].tau
        knowledge = VoteConfig(sigma=60.0, k_votes=5)
        trial = ws["trials"].eval[0]
        probe = bim_adaptive_vs_voting(
            model, waves[trial.test_id], waves[trial.enroll_id], trial.is_target,
            AttackConfig(epsilon=5.0, n_iters=5), knowledge, attacker_seed=3)
        assert probe.forward_backward_count == 30

        nontargets = [t for t in ws["trials"].eval if not t.is_target]
        fars = {}
        for n in (1, 5, 20, 40):
            hits = 0
            for t in nontargets:
                res = bim_adaptive_vs_voting(
                    model, waves[t.test_id], waves[t.enroll_id], False,
                    AttackConfig(epsilon=5.0, n_iters=n), knowledge,
                    attacker_seed=derive_seed(0, t.trial_id, "attacker"))
                assert res.forward_backward_count == n * 6
                cfg = VoteConfig(sigma=60.0, k_votes=5,
                                 seed=derive_seed(0, t.trial_id, "defense"))
                s = vote_score(model, res.x_adv, None, cfg,
                               enroll_embedding=emb[t.enroll_id])
                hits += s >= tau
            fars[n] = hits / len(nontargets)
        early = fars[5] - fars[1]
        late = fars[40] - fars[20]
        ok = late < early
        report(8, ok, f"budget 30 exact, FAR-vs-N {fars}, "
                      f"increments early {early:+.3f} late {late:+.3f}")
        assert late < early


class TestCriterion9Determinism:
    def test_criterion_09_evaluate_reruns_byte_identical(self, tmp_path):
        """cmd_evaluate twice with the same config and seed under
        --no-timing, once with --threads 4: byte-identical CSVs."""
        config = tmp_path / "small.json"
        config.write_text("""{
          "seed": 23,
          "corpus": {"n_speakers": 4, "utterances_per_speaker": 4, "duration": 0.6},
          "train": {"epochs": 4, "batch_size": 8, "crop_seconds": 0.5,
                    "hidden_dim": 16, "embedding_dim": 8},
          "n_target_trials": 24, "n_nontarget_trials": 24,
          "attack": {"epsilon_grid": [5.0], "n_iters": 2},
          "defense": {"sigma_grid": [30.0], "k_votes": 3}
        }""")

        def cli(*args):
            proc = subprocess.run(
                [sys.executable, "-m", "asvrobust", *args],
                capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            return proc

        runs = []
        for name, extra in (("a", []), ("b", []), ("c", ["--threads", "4"])):
            out = tmp_path / name
            cli("gen-corpus", "--config", str(config), "--out", str(out))
            cli("train", "--config", str(config), "--out", str(out))
            cli("evaluate", "--config", str(config), "--out", str(out),
                "--no-timing", *extra)
            runs.append(((out / "report.csv").read_bytes(),
                         (out / "scores.csv").read_bytes()))
        ok = runs[0] == runs[1] == runs[2]
        report(9, ok, f"3 runs, report.csv {len(runs[0][0])} bytes identical, "
                      "threads=4 included")
        assert runs[0] == runs[1]
        assert runs[0] == runs[2]


class TestCriterion10FilterUnits:
    def test_criterion_10_hand_computed_filter_examples(self):
        mean = apply_filter(np.array([0.0, 3.0, 6.0]), FilterSpec("mean"))
        median = apply_filter(np.array([1.0, 9.0, 1.0]), FilterSpec("median"))
        const = np.full(32, 0.125)
        gauss = apply_filter(const, FilterSpec("gaussian"))
        ok = (
            np.array_equal(mean, [1.0, 3.0, 5.0])
            and np.array_equal(median, [1.0, 1.0, 1.0])
            and np.array_equal(gauss, const)
        )
        report(10, ok, f"mean {mean.tolist()}, median {median.tolist()}, "
                       "gaussian exact on constant")
        np.testing.assert_array_equal(mean, [1.0, 3.0, 5.0])
        np.testing.assert_array_equal(median, [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(gauss, const)
