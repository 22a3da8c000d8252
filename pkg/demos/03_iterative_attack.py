"""Push trials across the threshold with sign-gradient steps.

The attacker differentiates the cosine score through the whole pipeline
(waveform to features to embedding) and takes N small signed steps,
staying inside an L-infinity ball of eps 16-bit amplitude units around
the original. Impostor trials climb the score, genuine trials descend
it. Run demo 02 first, or let this one build the workspace.
"""

from pathlib import Path

from asvrobust import AttackConfig, ExperimentConfig, bim, calibrate_threshold
from asvrobust.corpus import load_corpus_dir
from asvrobust.experiment import run_gen_corpus, run_train
from asvrobust.metrics import eval_far, eval_frr, read_trials_csv
from asvrobust.model import _unit_cosine, load_checkpoint

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
ntgt = [raw(t) for t in trials.eval if not t.is_target]
tgt = [raw(t) for t in trials.eval if t.is_target]
print(f"tau {thr.tau:.4f}   no attack: eval FAR {eval_far(ntgt, thr.tau):.3f}   "
      f"FRR {eval_frr(tgt, thr.tau):.3f}")
print()

# one initially rejected impostor trial up close: score per budget
t = next(t for t in trials.eval if not t.is_target and raw(t) < thr.tau)
print(f"impostor trial {t.trial_id} ({t.test_id} vs {t.enroll_id}), "
      f"raw score {raw(t):.4f}")
for eps in (1.0, 5.0, 10.0):
    res = bim(model, waves[t.test_id], waves[t.enroll_id], t.is_target,
              AttackConfig(epsilon=eps))
    print(f"  eps {eps:4.0f}: score {res.score_before:.4f} -> {res.score_after:.4f}"
          f"   moved {res.linf_distance:.1f} units"
          f"   {'ACCEPTED' if res.score_after >= thr.tau else 'still rejected'}")
print()

# the whole eval partition at each budget
print("full eval partition, 5 iterations per attack:")
for eps in (1.0, 5.0, 10.0):
    cfg = AttackConfig(epsilon=eps)
    adv_ntgt, adv_tgt = [], []
    for t in trials.eval:
        res = bim(model, waves[t.test_id], waves[t.enroll_id], t.is_target, cfg)
        (adv_tgt if t.is_target else adv_ntgt).append(res.score_after)
    print(f"  eps {eps:4.0f}: FAR {eval_far(adv_ntgt, thr.tau):.3f}   "
          f"FRR {eval_frr(adv_tgt, thr.tau):.3f}")
print()
print("larger budgets hurt more, and a few units already flip most trials;")
print("one unit is one least significant bit of 16-bit audio.")
