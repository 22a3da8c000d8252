"""Train the verifier and calibrate its operating threshold.

Builds the default workspace (20 speakers, 10 utterances each), trains
the embedding model, then calibrates the decision threshold on the dev
trials at the equal-error point and reports what that threshold does on
the held-out eval trials. Later demos reuse the workspace, so the
one-time build cost is paid here.
"""

import csv
from pathlib import Path

from asvrobust import ExperimentConfig, calibrate_threshold, eval_far, eval_frr
from asvrobust.corpus import load_corpus_dir
from asvrobust.experiment import run_gen_corpus, run_train
from asvrobust.metrics import read_trials_csv
from asvrobust.model import _unit_cosine, load_checkpoint

WORKSPACE = Path(__file__).resolve().parent / "_workspace"

config = ExperimentConfig(out_dir=str(WORKSPACE))
if not (WORKSPACE / "model.ckpt").exists():
    print("building the default workspace, roughly half a minute ...")
    run_gen_corpus(config, WORKSPACE)
    run_train(config, WORKSPACE)
    print()

# how training went, first and last few epochs
with open(WORKSPACE / "train_log.csv") as f:
    log = list(csv.DictReader(f))
for row in log[:2] + log[-2:]:
    print(f"epoch {row['epoch']:>3}   loss {float(row['loss']):8.4f}   "
          f"dev EER {float(row['dev_eer']):.3f}")
print()

# score every trial with the raw cosine and calibrate on dev only
utts, rate = load_corpus_dir(WORKSPACE)
model = load_checkpoint(WORKSPACE / "model.ckpt")
trials = read_trials_csv(WORKSPACE / "trials.csv")
emb = {u.utterance_id: model.embed(u.waveform) for u in utts}

def score(t):
    return float(_unit_cosine(emb[t.test_id], emb[t.enroll_id]))

thr = calibrate_threshold(
    [score(t) for t in trials.dev if t.is_target],
    [score(t) for t in trials.dev if not t.is_target],
)
print(f"dev trials: {len(trials.dev)}   eval trials: {len(trials.eval)}")
print(f"threshold tau {thr.tau:.4f}   dev FAR {thr.far:.3f}   "
      f"dev FRR {thr.frr:.3f}   dev EER {thr.eer:.3f}")

# the same threshold applied to trials the calibration never saw
tgt = [score(t) for t in trials.eval if t.is_target]
ntgt = [score(t) for t in trials.eval if not t.is_target]
print(f"eval FAR {eval_far(ntgt, thr.tau):.3f}   "
      f"eval FRR {eval_frr(tgt, thr.tau):.3f}")
print()
print(f"workspace cached under {WORKSPACE}")
