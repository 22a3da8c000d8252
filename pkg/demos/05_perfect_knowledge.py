"""Give the attacker the defense and watch the returns diminish.

Here the attacker knows everything except the defender's inference
seed: at each iteration it redraws its own K-sample noise neighbourhood
of the voting defense and ascends the gradient of the mean score. Each
iteration costs K+1 score gradients, so honesty about budget matters:
forward_backward_count reports exactly N*(K+1). More iterations keep
helping for a while, then the curve flattens well short of the
undefended attack's damage. Run demo 02 first, or let this one build
the workspace.
"""

from pathlib import Path

from asvrobust import (
    AttackConfig,
    ExperimentConfig,
    VoteConfig,
    bim_adaptive_vs_voting,
    calibrate_threshold,
    vote_score,
)
from asvrobust.corpus import load_corpus_dir
from asvrobust.experiment import run_gen_corpus, run_train
from asvrobust.metrics import eval_far, read_trials_csv
from asvrobust.model import _unit_cosine, load_checkpoint
from asvrobust.seeding import derive_seed

WORKSPACE = Path(__file__).resolve().parent / "_workspace"

config = ExperimentConfig(out_dir=str(WORKSPACE))
if not (WORKSPACE / "model.ckpt").exists():
    print("building the default workspace, roughly half a minute ...")
    run_gen_corpus(config, WORKSPACE)
    run_train(config, WORKSPACE)

utts, rate = load_corpus_dir(WORKSPACE)
model = load_checkpoint(WORKSPACE / "model.ckpt")
trials = read_trials_csv(WORKSPACE / "trials.csv")
waves = {u.utterance_id: u.waveform for u in utts}
emb = {u.utterance_id: model.embed(u.waveform) for u in utts}

def raw(t):
    return float(_unit_cosine(emb[t.test_id], emb[t.enroll_id]))

thr = calibrate_threshold(
    [raw(t) for t in trials.dev if t.is_target],
    [raw(t) for t in trials.dev if not t.is_target],
)

# eps 5, defense sigma 60 with K=5 votes; attacker assumes the same
knowledge = VoteConfig(sigma=60.0, k_votes=5)
impostors = [t for t in trials.eval if not t.is_target][:30]

print(f"{len(impostors)} impostor trials, eps 5, defense sigma 60 K=5")
print()
print("   N   budget   voted FAR")
for n in (1, 5, 10, 20, 40):
    scores = []
    budget = None
    for t in impostors:
        res = bim_adaptive_vs_voting(
            model, waves[t.test_id], waves[t.enroll_id], False,
            AttackConfig(epsilon=5.0, n_iters=n), knowledge,
            attacker_seed=derive_seed(0, t.trial_id, "attacker"))
        budget = res.forward_backward_count
        cfg = VoteConfig(sigma=60.0, k_votes=5,
                         seed=derive_seed(0, t.trial_id, "defense"))
        scores.append(vote_score(model, res.x_adv, None, cfg,
                                 enroll_embedding=emb[t.enroll_id]))
    print(f"  {n:2d}   {budget:6d}   {eval_far(scores, thr.tau):9.3f}")

print()
print("each doubling of effort buys less; the defender's unseen noise")
print("stream is the part no gradient can chase.")
